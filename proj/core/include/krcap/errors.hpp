#pragma once

#include <stdexcept>
#include <string>

namespace krcap {

// Base error for everything raised by the library.
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Bad configuration value or unknown key. CLI maps this to exit code 2.
class ConfigError : public Error {
public:
  using Error::Error;
};

// Malformed or inconsistent data (corpora, dataset files). Exit code 3.
class DataError : public Error {
public:
  using Error::Error;
};

// A required input artifact (checkpoint, manifest, split file) is missing
// or unreadable. Exit code 4.
class MissingArtifactError : public Error {
public:
  using Error::Error;
};

// Training produced a non-finite loss. Exit code 5.
class DivergenceError : public Error {
public:
  using Error::Error;
};

}  // namespace krcap
