#include <atomic>
#include <chrono>
#include <random>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "simr/prompt.hpp"
#include <nlohmann/json.hpp>

using namespace simr;

namespace {

ConceptVocab concepts() {
  std::mt19937_64 rng(1);
  return ConceptVocab::make(8, 4, rng);
}

// Local HTTP server on an ephemeral port, stopped on destruction.
class MockServer {
 public:
  explicit MockServer(httplib::Server::Handler handler) {
    server_.Post("/rewrite", std::move(handler));
    port_ = server_.bind_to_any_port("127.0.0.1");
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }
  ~MockServer() {
    server_.stop();
    thread_.join();
  }

  RewriterEndpoint endpoint() const {
    RewriterEndpoint e;
    e.url = "http://127.0.0.1:" + std::to_string(port_) + "/rewrite";
    e.timeout = std::chrono::milliseconds(500);
    e.backoff = std::chrono::milliseconds(5);
    return e;
  }

 private:
  httplib::Server server_;
  int port_ = 0;
  std::thread thread_;
};

}  // namespace

TEST_CASE("prompt_align") {
  auto c = concepts();
  CHECK(prompt_align({"evidence of fibrosis ."}, c) ==
        std::vector<std::string>{"evidence of fibrosis .", "there is fibrosis ."});
  CHECK(prompt_align({"there is fibrosis ."}, c) == std::vector<std::string>{"there is fibrosis ."});
  CHECK(prompt_align({"signs of fibrosis and cardiomegaly ."}, c) ==
        std::vector<std::string>{"signs of fibrosis and cardiomegaly .", "there is cardiomegaly .",
                                 "there is fibrosis ."});
  CHECK(prompt_align({"nothing remarkable ."}, c) == std::vector<std::string>{"nothing remarkable ."});
}

TEST_CASE("prompt_align is idempotent and keeps the originals as a prefix") {
  auto c = concepts();
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<std::size_t> pick_concept(0, c.size() - 1), pick_tmpl(0, c.templates.size() - 1),
      count(1, 4);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<std::string> report;
    for (std::size_t s = count(rng); s > 0; --s) {
      report.push_back(instantiate(c.templates[pick_tmpl(rng)], {c.names[pick_concept(rng)]}));
    }
    auto once = prompt_align(report, c);
    CHECK(std::equal(report.begin(), report.end(), once.begin()));
    CHECK(prompt_align(once, c) == once);
  }
}

TEST_CASE("remote_rewrite") {
  auto c = concepts();
  const std::vector<std::string> report{"evidence of edema .", "mass is noted ."};

  SUBCASE("no endpoint falls back to prompt_align") {
    auto r = remote_rewrite(report, c, std::nullopt);
    CHECK(r.sentences == prompt_align(report, c));
    CHECK_FALSE(r.remote);
  }

  SUBCASE("echo server returns the input") {
    MockServer server([](const httplib::Request& req, httplib::Response& res) {
      auto body = nlohmann::json::parse(req.body);
      CHECK(body.contains("instruction"));
      CHECK(body["vocab"].size() == 8);
      res.set_content(nlohmann::json{{"rewritten", body["report"]}}.dump(), "application/json");
    });
    auto r = remote_rewrite(report, c, server.endpoint());
    CHECK(r.remote);
    CHECK(r.sentences == report);
  }

  SUBCASE("fixture rewrite is consumed verbatim") {
    MockServer server([](const httplib::Request&, httplib::Response& res) {
      res.set_content(R"({"rewritten": "evidence of edema .\nthere is edema .\nthere is mass ."})", "application/json");
    });
    auto r = remote_rewrite(report, c, server.endpoint());
    CHECK(r.sentences == std::vector<std::string>{"evidence of edema .", "there is edema .", "there is mass ."});
  }

  SUBCASE("malformed replies are retried then fall back") {
    std::atomic<int> calls{0};
    MockServer server([&](const httplib::Request&, httplib::Response& res) {
      ++calls;
      res.set_content(R"({"text": 1})", "application/json");
    });
    auto r = remote_rewrite(report, c, server.endpoint());
    CHECK(calls == 3);
    CHECK_FALSE(r.remote);
    CHECK(r.sentences == prompt_align(report, c));
    CHECK(r.warning.find("malformed") != std::string::npos);
  }

  SUBCASE("transient failure recovers on retry") {
    std::atomic<int> calls{0};
    MockServer server([&](const httplib::Request&, httplib::Response& res) {
      if (++calls == 1) {
        res.status = 503;
        return;
      }
      res.set_content(R"({"rewritten": "there is edema ."})", "application/json");
    });
    auto r = remote_rewrite(report, c, server.endpoint());
    CHECK(calls == 2);
    CHECK(r.remote);
  }

  SUBCASE("unreachable server falls back") {
    RewriterEndpoint e;
    e.url = "http://127.0.0.1:1/rewrite";
    e.timeout = std::chrono::milliseconds(200);
    e.backoff = std::chrono::milliseconds(1);
    auto r = remote_rewrite(report, c, e);
    CHECK_FALSE(r.remote);
    CHECK(r.sentences == prompt_align(report, c));
  }
}
