#pragma once

#include <cstddef>
#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace vilseg {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid or inconsistent configuration values.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller handed an argument that violates an operation's precondition.
class InputError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// Text input that failed to parse; carries the 1-based line number.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// Referenced resources are missing or corrupt.
class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::vector<std::string> items)
      : Error(what), items_(std::move(items)) {}
  const std::vector<std::string>& items() const { return items_; }

 private:
  std::vector<std::string> items_;
};

/// Non-finite or undefined numeric result.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// region_pool was asked for a cluster with no pixels in the mask.
class RegionAbsent : public Error {
 public:
  explicit RegionAbsent(int cluster)
      : Error("cluster " + std::to_string(cluster) + " has no pixels"), cluster_(cluster) {}
  int cluster() const { return cluster_; }

 private:
  int cluster_;
};

namespace log {

using Sink = std::function<void(const std::string&)>;

inline Sink& warning_sink() {
  static Sink sink = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
  return sink;
}

inline void warn(const std::string& msg) { warning_sink()(msg); }

/// Swaps the warning sink for the lifetime of the guard (tests capture warnings this way).
class ScopedSink {
 public:
  explicit ScopedSink(Sink sink) : previous_(warning_sink()) { warning_sink() = std::move(sink); }
  ~ScopedSink() { warning_sink() = previous_; }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

}  // namespace log
}  // namespace vilseg
