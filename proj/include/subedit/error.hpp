#pragma once

#include <stdexcept>
#include <string>

namespace subedit {

enum class Errc {
  invalid_input,
  degenerate_spectrum,
  invalid_basis,
  ill_conditioned,
  factorization,
  generation,
  parse,
  vocabulary,
  index,
  training_failed,
  optimization,
  dimension_mismatch,
  insufficient_data,
  undefined_ratio,
  empty_input,
  config_mismatch,
  io,
  missing_prerequisite,
};

inline const char* to_string(Errc code) {
  switch (code) {
    case Errc::invalid_input: return "invalid_input";
    case Errc::degenerate_spectrum: return "degenerate_spectrum";
    case Errc::invalid_basis: return "invalid_basis";
    case Errc::ill_conditioned: return "ill_conditioned";
    case Errc::factorization: return "factorization";
    case Errc::generation: return "generation";
    case Errc::parse: return "parse";
    case Errc::vocabulary: return "vocabulary";
    case Errc::index: return "index";
    case Errc::training_failed: return "training_failed";
    case Errc::optimization: return "optimization";
    case Errc::dimension_mismatch: return "dimension_mismatch";
    case Errc::insufficient_data: return "insufficient_data";
    case Errc::undefined_ratio: return "undefined_ratio";
    case Errc::empty_input: return "empty_input";
    case Errc::config_mismatch: return "config_mismatch";
    case Errc::io: return "io";
    case Errc::missing_prerequisite: return "missing_prerequisite";
  }
  return "unknown";
}

/// Every failure in the library surfaces as an Error carrying a machine-readable code.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

class TrainingFailed : public Error {
 public:
  TrainingFailed(double recall, const std::string& what)
      : Error(Errc::training_failed, what), recall_(recall) {}
  double recall() const noexcept { return recall_; }

 private:
  double recall_;
};

}  // namespace subedit
