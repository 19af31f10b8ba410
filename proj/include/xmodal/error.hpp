/*
 * Copyright 2026 The xmodal Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace xmodal {

// Base of every error raised by the library. `exit_code()` is the process
// exit status the CLI reports for this kind of failure.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual int exit_code() const { return 1; }
};

// Shape mismatch between tensors, layers or models.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Too few samples to fit a model.
class InsufficientDataError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration or argument.
class ConfigError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 2; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 3; }
};

// Malformed binary file. Carries the byte offset where decoding failed.
class FormatError : public IoError {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : IoError(what + " (at byte offset " + std::to_string(offset) + ")"), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::int64_t iteration)
      : Error(what + " at iteration " + std::to_string(iteration)), iteration_(iteration) {}
  std::int64_t iteration() const { return iteration_; }
  int exit_code() const override { return 4; }

 private:
  std::int64_t iteration_;
};

// A required run artifact (checkpoint, dataset) is missing.
class MissingArtifactError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 5; }
};

// An operation needs held-out classes but the dataset has none.
class NoHoldoutError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 6; }
};

// A finite-difference check exceeded its tolerance.
class GradientCheckError : public Error {
 public:
  using Error::Error;
  int exit_code() const override { return 7; }
};

}  // namespace xmodal
