#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <queue>
#include <random>
#include <vector>

#include "spongelab/error.hpp"
#include "spongelab/streaming.hpp"
#include "spongelab/synthetic.hpp"

using namespace spongelab;

namespace {

// Event-driven single-server FIFO queue: request t arrives at (t-1)*dt and
// needs service[t] seconds. Returns each request's response time.
std::vector<double> queue_response_times(const std::vector<double>& service, double dt) {
  enum Kind { departure = 0, arrival = 1 };  // departures first on ties
  struct Event {
    double time;
    Kind kind;
    std::size_t id;
    bool operator>(const Event& o) const {
      return time != o.time ? time > o.time : kind > o.kind;
    }
  };
  std::priority_queue<Event, std::vector<Event>, std::greater<>> events;
  for (std::size_t i = 0; i < service.size(); ++i) {
    events.push({static_cast<double>(i) * dt, arrival, i});
  }
  std::queue<std::size_t> waiting;
  bool busy = false;
  std::vector<double> arrived(service.size()), response(service.size());
  auto start = [&](std::size_t id, double now) {
    busy = true;
    events.push({now + service[id], departure, id});
  };
  while (!events.empty()) {
    const Event e = events.top();
    events.pop();
    if (e.kind == arrival) {
      arrived[e.id] = e.time;
      if (busy) waiting.push(e.id);
      else start(e.id, e.time);
    } else {
      response[e.id] = e.time - arrived[e.id];
      busy = false;
      if (!waiting.empty()) {
        const auto next = waiting.front();
        waiting.pop();
        start(next, e.time);
      }
    }
  }
  return response;
}

}  // namespace

TEST_CASE("window examples") {
  std::vector<double> px;
  for (int f = 1; f <= 20; ++f) px.push_back(f / 20.0);
  const VideoTensor stream(Tensor({20, 1, 1, 1}, px));
  const auto frames = [](const VideoTensor& w) {
    std::vector<int> out;
    for (std::size_t t = 0; t < w.frames(); ++t) out.push_back(static_cast<int>(std::lround(w.at(t, 0, 0, 0) * 20)));
    return out;
  };
  CHECK(frames(window_at(stream, 8, 8)) == std::vector<int>{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(frames(window_at(stream, 3, 8)) == std::vector<int>{1, 1, 1, 1, 1, 1, 2, 3});
  CHECK(frames(window_at(stream, 20, 8)) == std::vector<int>{13, 14, 15, 16, 17, 18, 19, 20});
  CHECK_THROWS_AS(window_at(stream, 0, 8), ValidationError);
  CHECK_THROWS_AS(window_at(stream, 21, 8), ValidationError);
}

TEST_CASE("cumulative latency recurrence examples") {
  const std::vector<double> raw{1.0, 1.0, 1.0};
  CHECK(cum_latency(raw, 0.5) == std::vector<double>{1.0, 1.5, 2.0});
  const std::vector<double> small{0.2, 0.5, 0.1};
  CHECK(cum_latency(small, 0.5) == small);
  const std::vector<double> bad{0.1, -0.1};
  CHECK_THROWS_AS(cum_latency(bad, 0.5), ValidationError);
  CHECK_THROWS_AS(cum_latency(raw, 0.0), ValidationError);
}

TEST_CASE("recurrence equals a discrete-event queue on random traces") {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> dt_dist(0.1, 1.0);
  double worst = 0.0;
  for (int trace = 0; trace < 100; ++trace) {
    const double dt = dt_dist(rng);
    // Mix light and heavy load so both idle gaps and long backlogs occur.
    std::uniform_real_distribution<double> service(0.0, dt * (trace % 2 == 0 ? 1.3 : 0.9));
    std::vector<double> raw(1000);
    for (auto& r : raw) r = service(rng);
    const auto cum = cum_latency(raw, dt);
    const auto oracle = queue_response_times(raw, dt);
    for (std::size_t i = 0; i < raw.size(); ++i) worst = std::max(worst, std::abs(cum[i] - oracle[i]));
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("backlog diverges exactly when service exceeds the interval") {
  const double dt = 0.5;
  for (double c : {0.3, 0.5}) {
    const std::vector<double> raw(500, c);
    for (double v : cum_latency(raw, dt)) CHECK(v == doctest::Approx(c));
  }
  for (double c : {0.51, 1.33}) {
    const std::vector<double> raw(500, c);
    const auto cum = cum_latency(raw, dt);
    for (std::size_t t = 0; t < cum.size(); ++t) {
      CHECK(cum[t] == doctest::Approx(c + static_cast<double>(t) * (c - dt)));
      if (t > 0) CHECK(cum[t] >= cum[t - 1]);
    }
  }
}

TEST_CASE("safety violations") {
  const SafetyBudget budget;
  CHECK(budget.safe() == doctest::Approx(2.28));
  const std::vector<double> ok{1.0, 1.5, 2.0};
  CHECK_FALSE(safety_violations(ok, budget).first.has_value());
  const std::vector<double> late{1.0, 2.3};
  const auto r = safety_violations(late, budget);
  CHECK(r.first == 2);
  CHECK(r.flags == std::vector<bool>{false, true});
  const std::vector<double> zeros(5, 0.0);
  CHECK_FALSE(safety_violations(zeros, budget).first.has_value());
  CHECK_THROWS_AS(safety_violations(ok, SafetyBudget{2.0, 2.72}), ValidationError);
}

TEST_CASE("closed form for a stream of maximal generations") {
  LatencyModel lm;
  const double raw = lm.synthetic(128);
  CHECK(raw == doctest::Approx(1.33));
  const std::vector<double> trace(10, raw);
  const auto cum = cum_latency(trace, 0.5);
  for (std::size_t t = 0; t < cum.size(); ++t) {
    CHECK(cum[t] == doctest::Approx(1.33 + 0.83 * static_cast<double>(t)));
  }
  CHECK(safety_violations(cum, SafetyBudget{}).first == 3);
}

TEST_CASE("simulated stream bookkeeping") {
  const auto victim = ModelParams::init(ModelConfig{}, 3);
  const auto stream = gen_stream(6, 4, Domain::a);
  StreamConfig cfg;
  cfg.max_new_tokens = 4;
  const auto trace = run_stream(victim, stream, nullptr, cfg, SafetyBudget{});
  REQUIRE(trace.decisions.size() == 6);
  double prev = 0.0;
  for (const auto& d : trace.decisions) {
    CHECK(d.tokens >= 1);
    CHECK(d.tokens <= 4);
    CHECK(d.tau_raw == cfg.latency.a + cfg.latency.b * static_cast<double>(d.tokens));
    CHECK(d.tau_cum == d.tau_raw + std::max(0.0, prev - cfg.interval));
    CHECK(d.tau_cum >= d.tau_raw);
    CHECK(d.violation == (d.tau_cum > SafetyBudget{}.safe()));
    prev = d.tau_cum;
  }

  cfg.latency.source = LatencySource::measured;
  const auto m1 = run_stream(victim, stream, nullptr, cfg, SafetyBudget{});
  const auto m2 = run_stream(victim, stream, nullptr, cfg, SafetyBudget{});
  for (std::size_t i = 0; i < m1.decisions.size(); ++i) {
    CHECK(m1.decisions[i].tokens == m2.decisions[i].tokens);
    CHECK(m1.decisions[i].tokens == trace.decisions[i].tokens);
    CHECK(m1.decisions[i].tau_raw > 0.0);
  }
  CHECK_FALSE(trace.to_jsonl().empty());
  CHECK(trace.summary_json().find("first_violation") != std::string::npos);
}

TEST_CASE("stream config validation") {
  StreamConfig cfg;
  cfg.window = 0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = {};
  cfg.interval = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  cfg = {};
  cfg.latency.a = -1.0;
  CHECK_THROWS_AS(cfg.validate(), ValidationError);
  CHECK(parse_latency_source("measured") == LatencySource::measured);
  CHECK_THROWS_AS(parse_latency_source("guess"), ValidationError);
}
