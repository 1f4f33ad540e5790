// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace streamdec {

/// Base of every error thrown by the library. Each subclass maps to one
/// CLI exit code (see `exit_code`).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class ShapeError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 8; }
};

/// Vector length is not a multiple of the dot-engine lane count.
class AlignmentError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 8; }
};

class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 3; }
};

/// Malformed beat stream or container file. `beat_index` is -1 when the
/// problem is not attributable to a single beat (bad magic, checksum...).
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::int64_t beat_index = -1)
      : Error(beat_index >= 0 ? what + " (beat " + std::to_string(beat_index) + ")" : what),
        beat_index_(beat_index) {}
  std::int64_t beat_index() const noexcept { return beat_index_; }
  int exit_code() const noexcept override { return 4; }

 private:
  std::int64_t beat_index_;
};

/// Something does not fit: a memory region, or the KV cache context.
class CapacityError : public Error {
 public:
  CapacityError(const std::string& what, std::string region = {})
      : Error(what), region_(std::move(region)) {}
  const std::string& region() const noexcept { return region_; }
  int exit_code() const noexcept override { return 5; }

 private:
  std::string region_;
};

class DomainError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 6; }
};

class IndexError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 7; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 9; }
};

}  // namespace streamdec
