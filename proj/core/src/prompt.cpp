#include "simr/prompt.hpp"

#include <algorithm>
#include <cstdlib>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>
#include <thread>
#include <variant>

#include "httplib.h"

namespace simr {

std::vector<std::string> prompt_align(const std::vector<std::string>& sentences, const ConceptVocab& concepts) {
  std::vector<bool> seen(concepts.size(), false);
  for (const auto& s : sentences) {
    for (auto c : concepts.mentioned(s)) seen[c] = true;
  }
  auto out = sentences;
  for (std::size_t c = 0; c < concepts.size(); ++c) {
    if (!seen[c]) continue;
    auto canonical = instantiate(prompt_p1, {concepts.names[c]});
    if (std::find(out.begin(), out.end(), canonical) == out.end()) out.push_back(std::move(canonical));
  }
  return out;
}

std::optional<RewriterEndpoint> RewriterEndpoint::from_env() {
  const char* url = std::getenv(rewriter_env_var);
  if (url == nullptr || *url == '\0') return std::nullopt;
  RewriterEndpoint e;
  e.url = url;
  return e;
}

namespace {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) lines.push_back(line);
  }
  return lines;
}

// One attempt; returns the rewritten sentences or an error message.
std::variant<std::vector<std::string>, std::string> attempt(const RewriterEndpoint& e, const std::string& body) {
  const auto scheme_end = e.url.find("://");
  const auto path_start = e.url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  const auto origin = e.url.substr(0, path_start);
  const auto path = path_start == std::string::npos ? std::string("/") : e.url.substr(path_start);

  httplib::Client client(origin);
  if (!client.is_valid()) return "invalid rewriter url " + e.url;
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(e.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(e.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  auto res = client.Post(path, body, "application/json");
  if (!res) return "request failed: " + httplib::to_string(res.error());
  if (res->status != 200) return "HTTP status " + std::to_string(res->status);
  auto reply = nlohmann::json::parse(res->body, nullptr, false);
  if (reply.is_discarded() || !reply.is_object() || !reply.contains("rewritten") || !reply["rewritten"].is_string()) {
    return std::string("malformed reply, expected {\"rewritten\": string}");
  }
  auto lines = split_lines(reply["rewritten"].get<std::string>());
  if (lines.empty()) return std::string("empty rewrite");
  return lines;
}

}  // namespace

RewriteResult remote_rewrite(const std::vector<std::string>& sentences, const ConceptVocab& concepts,
                             const std::optional<RewriterEndpoint>& endpoint) {
  RewriteResult result;
  if (!endpoint) {
    result.sentences = prompt_align(sentences, concepts);
    return result;
  }
  std::string report;
  for (const auto& s : sentences) report += s + "\n";
  const nlohmann::json request = {
      {"report", report},
      {"instruction", "For every disease the report mentions, append the sentence '" + std::string(prompt_p1) +
                          "' with the disease name filled in. Keep the original sentences. One sentence per line."},
      {"vocab", concepts.names},
  };
  const auto body = request.dump();

  auto backoff = endpoint->backoff;
  std::string last_error;
  for (int i = 0; i <= endpoint->retries; ++i) {
    if (i > 0) {
      std::this_thread::sleep_for(backoff);
      backoff *= 2;
    }
    auto outcome = attempt(*endpoint, body);
    if (auto* lines = std::get_if<std::vector<std::string>>(&outcome)) {
      result.sentences = std::move(*lines);
      result.remote = true;
      return result;
    }
    last_error = std::get<std::string>(outcome);
  }
  result.warning = "rewriter at " + endpoint->url + " unavailable after " + std::to_string(endpoint->retries + 1) +
                   " attempts (" + last_error + "); using rule-based prompt alignment";
  std::clog << "warning: " << result.warning << '\n';
  result.sentences = prompt_align(sentences, concepts);
  return result;
}

}  // namespace simr
