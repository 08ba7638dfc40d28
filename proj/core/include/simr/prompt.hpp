#pragma once

// Prompt alignment: make training reports contain the inference prompt.
// The rule-based rewriter appends "there is <concept> ." for each concept a
// report mentions. An optional HTTP rewriter service can do the same job; it
// falls back to the rule-based path on any failure.

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "simr/synth.hpp"

namespace simr {

/// Original sentences followed by one canonical sentence per mentioned
/// concept (vocab order) that is not already present. Idempotent.
std::vector<std::string> prompt_align(const std::vector<std::string>& sentences, const ConceptVocab& concepts);

inline constexpr const char* rewriter_env_var = "SIMR_REWRITER_URL";

struct RewriterEndpoint {
  std::string url;  // http://host[:port]/path
  std::chrono::milliseconds timeout{2000};
  int retries = 2;
  std::chrono::milliseconds backoff{100};  // doubled after each failed attempt

  /// Endpoint from SIMR_REWRITER_URL, or nullopt when unset or empty.
  static std::optional<RewriterEndpoint> from_env();
};

struct RewriteResult {
  std::vector<std::string> sentences;
  bool remote = false;   // true when the service answered
  std::string warning;   // why the fallback was taken, empty otherwise
};

/// POSTs {"report", "instruction", "vocab"} and expects {"rewritten": string}
/// with one sentence per line. Network errors, timeouts and malformed
/// replies are retried, then answered by prompt_align with a warning.
RewriteResult remote_rewrite(const std::vector<std::string>& sentences, const ConceptVocab& concepts,
                             const std::optional<RewriterEndpoint>& endpoint);

}  // namespace simr
