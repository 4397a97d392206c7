#pragma once

#include <stdexcept>
#include <string>

namespace pafedfv {

// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// Dimension or length mismatch between operands.
class ShapeError : public Error {
public:
  using Error::Error;
};

// Argument outside the mathematical domain (non-finite, zero norm, bad one-hot...).
class DomainError : public Error {
public:
  using Error::Error;
};

// Missing key in a lookup table (e.g. a label without a center).
class LookupError : public Error {
public:
  using Error::Error;
};

// Invalid configuration, detected before any compute starts.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Protocol violation between client and server (duplicate upload, wrong phase).
class ProtocolError : public Error {
public:
  using Error::Error;
};

// Upload tagged with a round the server has already closed.
class StaleMessageError : public ProtocolError {
public:
  using ProtocolError::ProtocolError;
};

// Non-finite loss during training.
class DivergenceError : public Error {
public:
  DivergenceError(const std::string& what, std::size_t round, std::size_t batch)
      : Error(what + " (round " + std::to_string(round) + ", batch " + std::to_string(batch) + ")"),
        round_(round),
        batch_(batch) {}

  std::size_t round() const noexcept { return round_; }
  std::size_t batch() const noexcept { return batch_; }

private:
  std::size_t round_;
  std::size_t batch_;
};

// Optimality gap blew up in the convergence harness.
class InstabilityError : public Error {
public:
  using Error::Error;
};

}  // namespace pafedfv
