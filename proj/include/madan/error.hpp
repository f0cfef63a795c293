#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace madan {

// Each kind maps to a distinct CLI exit code (see exit_code()).
enum class ErrorKind {
  config,
  load,
  contract,
  shape,
  inference,
  composition,
  undefined_loss,
  divergence,
  stage_order,
  checkpoint,
  kind_mismatch,
  lock,
  io,
  usage,  // command-line parse errors
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return "config";
    case ErrorKind::load: return "load";
    case ErrorKind::contract: return "contract";
    case ErrorKind::shape: return "shape";
    case ErrorKind::inference: return "inference";
    case ErrorKind::composition: return "composition";
    case ErrorKind::undefined_loss: return "undefined_loss";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::stage_order: return "stage_order";
    case ErrorKind::checkpoint: return "checkpoint";
    case ErrorKind::kind_mismatch: return "kind_mismatch";
    case ErrorKind::lock: return "lock";
    case ErrorKind::io: return "io";
    case ErrorKind::usage: return "usage";
  }
  return "unknown";
}

inline int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return 3;
    case ErrorKind::load: return 4;
    case ErrorKind::shape: return 5;
    case ErrorKind::kind_mismatch: return 6;
    case ErrorKind::checkpoint: return 7;
    case ErrorKind::divergence: return 8;
    case ErrorKind::lock: return 9;
    case ErrorKind::stage_order: return 10;
    case ErrorKind::io: return 11;
    case ErrorKind::usage: return 2;
    default: return 12;
  }
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) {
  throw Error(kind, what);
}

inline void require(bool cond, ErrorKind kind, const std::string& what) {
  if (!cond) fail(kind, what);
}

}  // namespace madan
