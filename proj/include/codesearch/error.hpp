// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <iostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>

namespace codesearch {

enum class ErrorKind {
  kDimension,    // shape mismatch
  kIndex,        // id or position out of range
  kNumeric,      // non-finite values
  kData,         // empty or malformed data
  kConfig,       // invalid configuration
  kIo,           // unreadable / unwritable file
  kLoad,         // corrupt or incompatible artifact
  kFingerprint,  // artifact built by a different encoder
};

inline const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension error";
    case ErrorKind::kIndex: return "index error";
    case ErrorKind::kNumeric: return "numeric error";
    case ErrorKind::kData: return "data error";
    case ErrorKind::kConfig: return "config error";
    case ErrorKind::kIo: return "io error";
    case ErrorKind::kLoad: return "load error";
    case ErrorKind::kFingerprint: return "fingerprint error";
  }
  return "error";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

// Non-fatal conditions (degenerate vectors, clamped schedules, short budgets)
// are reported through a replaceable sink. Default prints to stderr.
using DiagnosticSink = std::function<void(std::string_view)>;

inline DiagnosticSink& diagnostic_sink() {
  thread_local DiagnosticSink sink = [](std::string_view msg) {
    std::cerr << "warning: " << msg << '\n';
  };
  return sink;
}

inline void diagnostic(std::string_view msg) {
  if (diagnostic_sink()) diagnostic_sink()(msg);
}

// Swaps the sink for the lifetime of the guard.
class ScopedDiagnosticSink {
 public:
  explicit ScopedDiagnosticSink(DiagnosticSink sink) : previous_(std::move(diagnostic_sink())) {
    diagnostic_sink() = std::move(sink);
  }
  ~ScopedDiagnosticSink() { diagnostic_sink() = std::move(previous_); }
  ScopedDiagnosticSink(const ScopedDiagnosticSink&) = delete;
  ScopedDiagnosticSink& operator=(const ScopedDiagnosticSink&) = delete;

 private:
  DiagnosticSink previous_;
};

}  // namespace codesearch
