#include <doctest.h>

#include <cmath>
#include <set>

#include "medal/decoder.hpp"
#include "medal/error.hpp"
#include "medal/harness.hpp"
#include "oracles.hpp"

using namespace medal;

namespace {

const TabularModel& xor2() {
  static const TabularModel q(2, 2, {0.5, 0.0, 0.0, 0.5});
  return q;
}

DecodeConfig tiny(std::size_t length, std::size_t lc) {
  DecodeConfig c;
  c.length = length;
  c.search.init_length = lc;
  c.search.max_simulations = 60;
  return c;
}

std::vector<UnmaskAction> actions_of(const DecodeResult& r) { return r.reveal_order; }

const NGramMaskedModel& toy_ngram() {
  static const NGramMaskedModel m = fit_ngram({{0, 1, 2, 3, 0, 1, 2, 3}, {1, 1, 2, 0, 3, 3, 1, 0}, {2, 3, 0, 1}}, 2, 0.5);
  return m;
}

}  // namespace

TEST_CASE("select_candidate takes the highest gain, earliest on ties") {
  auto pool_of = [](std::vector<double> gains) {
    CandidatePool p;
    for (double g : gains) p.collected.push_back(Candidate{SeqState{}, g, std::nullopt, {}, false});
    return p;
  };
  CHECK(select_candidate(pool_of({0.4, 0.9, 0.7})) == 1);
  CHECK(select_candidate(pool_of({0.3})) == 0);
  CHECK(select_candidate(pool_of({0.5, 0.5, 0.5})) == 0);
  try {
    select_candidate(pool_of({}));
    FAIL("expected EmptyPool");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyPool);
  }
}

TEST_CASE("identity and template augmentation") {
  Rng rng(1);
  const std::vector<Token> prompt{3, 1, 2};
  AugmenterConfig a;
  CHECK(augment_prompt(prompt, a, toy_ngram(), DecodeConfig{}, rng) == prompt);
  a.strategy = "template";
  const auto out = augment_prompt(prompt, a, toy_ngram(), DecodeConfig{}, rng);
  const auto tmpl = decomposition_template(a, toy_ngram().vocab());
  CHECK(tmpl.size() == 2 * 3 * 2);
  CHECK(out.size() == tmpl.size() + prompt.size());
  CHECK(std::equal(tmpl.begin(), tmpl.end(), out.begin()));
  CHECK(std::equal(prompt.begin(), prompt.end(), out.end() - 3));
  a.template_tokens = {1, 1};
  CHECK(augment_prompt(prompt, a, toy_ngram(), DecodeConfig{}, rng).size() == 5);
  CHECK_THROWS_AS(augment_prompt({}, AugmenterConfig{}, toy_ngram(), DecodeConfig{}, rng), Error);
}

TEST_CASE("self-generate appends a replayable auxiliary decode") {
  AugmenterConfig a;
  a.strategy = "self-generate";
  a.aux_length = 5;
  DecodeConfig cfg = tiny(6, 0);
  const std::vector<Token> prompt{2, 0};
  Rng rng(42);
  const auto out = augment_prompt(prompt, a, toy_ngram(), cfg, rng);

  std::vector<Token> base = prompt;
  const auto tmpl = decomposition_template(a, toy_ngram().vocab());
  base.insert(base.end(), tmpl.begin(), tmpl.end());
  Rng replay_rng(42);
  const auto aux = finish_decode(toy_ngram(), SeqState::fully_masked(base, 5, toy_ngram().vocab()), cfg, replay_rng);
  auto want = base;
  const auto gen = aux.final.generation();
  want.insert(want.end(), gen.begin(), gen.end());
  CHECK(out == want);
  CHECK(out.size() == prompt.size() + tmpl.size() + 5);
}

TEST_CASE("unknown strategies fail at load time") {
  nlohmann::json j = {{"augmenter", {{"strategy", "oracle"}}}};
  CHECK_THROWS_AS(decode_config_from_json(j), Error);
  CHECK_THROWS_AS(decode_config_from_json({{"lenght", 4}}), Error);
}

TEST_CASE("one mask left in argmax mode commits the most probable token") {
  const TabularModel q(3, 2, {0.1, 0.2, 0.0, 0.05, 0.15, 0.1, 0.3, 0.0, 0.1});
  DecodeConfig cfg = tiny(2, 0);
  cfg.remaining_mode = RemainingMode::argmax;
  Rng rng(1);
  const SeqState s = apply_action(SeqState::fully_masked({}, 2, q.vocab()), {0, 1});
  const auto r = finish_decode(q, s, cfg, rng);
  // p(x1 | x0 = 1) = (0.05, 0.15, 0.1) / 0.3
  CHECK(r.final.token(1) == 1);
  CHECK(r.reveal_order.size() == 1);
}

TEST_CASE("tiny temperature sampling matches argmax") {
  Rng g(6);
  for (int inst = 0; inst < 5; ++inst) {
    const TabularModel q = oracle::random_joint(g, 3, 4);
    DecodeConfig a = tiny(4, 0), s = tiny(4, 0);
    a.remaining_mode = RemainingMode::argmax;
    s.sample_temperature = 1e-9;
    Rng ra(inst), rs(inst);
    const SeqState root = SeqState::fully_masked({}, 4, q.vocab());
    CHECK(actions_of(finish_decode(q, root, a, ra)) == actions_of(finish_decode(q, root, s, rs)));
  }
}

TEST_CASE("argmax decoding of xor never produces a zero-probability pair") {
  DecodeConfig cfg = tiny(2, 0);
  cfg.remaining_mode = RemainingMode::argmax;
  const SeqState root = SeqState::fully_masked({}, 2, xor2().vocab());
  Rng rng(1);
  const auto g = finish_decode(xor2(), root, cfg, rng).final.generation();
  CHECK(g[0] == g[1]);
  // Both possible first actions lead to consistent completions.
  for (Token v : {0, 1}) {
    const auto r = finish_decode(xor2(), apply_action(root, {0, v}), cfg, rng);
    CHECK(xor2().prob(r.final.generation()) > 0);
  }
}

TEST_CASE("sampled step actions follow softmax of the scores") {
  // Three positions, best token only: the pooled set is three actions.
  const FactorizedModel f(3, {{0.9, 0.05, 0.05}, {0.6, 0.3, 0.1}, {0.4, 0.35, 0.25}});
  DecodeConfig cfg = tiny(3, 0);
  cfg.search.k1 = 1;
  cfg.search.k2 = 3;
  cfg.sample_temperature = 0.1;
  const SeqState root = SeqState::fully_masked({}, 3, f.vocab());
  const auto cands = build_candidates(root, f.predict(root), 1, 3, cfg.search.score);
  REQUIRE(cands.pooled.size() == 3);
  std::vector<double> w;
  double z = 0;
  for (const auto& a : cands.pooled) z += std::exp(a.score / cfg.sample_temperature);
  for (const auto& a : cands.pooled) w.push_back(std::exp(a.score / cfg.sample_temperature) / z);

  const int n = 100000;
  std::map<std::size_t, int> counts;
  Rng rng(2024);
  for (int i = 0; i < n; ++i) {
    cfg.total_steps = 3;
    const auto r = finish_decode(f, root, cfg, rng);
    ++counts[r.reveal_order.front().position];
  }
  for (std::size_t i = 0; i < 3; ++i) {
    const double p = w[i];
    const double sigma = std::sqrt(n * p * (1 - p));
    CHECK(std::abs(counts[cands.pooled[i].action.position] - n * p) <= 3 * sigma);
  }
}

TEST_CASE("k tokens per step reveals distinct positions") {
  Rng g(8);
  const TabularModel q = oracle::random_joint(g, 3, 4);
  DecodeConfig cfg = tiny(4, 0);
  cfg.tokens_per_step = 3;
  Rng rng(3);
  const auto r = finish_decode(q, SeqState::fully_masked({}, 4, q.vocab()), cfg, rng);
  REQUIRE(r.per_step_scores.size() == 2);
  CHECK(r.per_step_scores[0].actions.size() == 3);
  CHECK(r.per_step_scores[1].actions.size() == 1);
  std::set<std::size_t> pos;
  for (const auto& a : r.per_step_scores[0].actions) pos.insert(a.action.position);
  CHECK(pos.size() == 3);
}

TEST_CASE("total steps must cover the remaining masks") {
  DecodeConfig cfg = tiny(4, 1);
  cfg.total_steps = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.total_steps = 3;
  CHECK_NOTHROW(cfg.validate());
  cfg.total_steps = 10;  // an upper bound; decoding stops once resolved
  Rng g(1), rng(1);
  const TabularModel q = oracle::random_joint(g, 3, 4);
  const auto r = decode(q, {0}, cfg, rng);
  CHECK(r.final.complete());
  CHECK(r.per_step_scores.size() == 3);
}

TEST_CASE("decode results are complete permutations that replay") {
  Rng g(10);
  for (int inst = 0; inst < 4; ++inst) {
    const TabularModel q = oracle::random_joint(g, 3, 4);
    for (std::size_t lc : {0, 1, 2}) {
      DecodeConfig cfg = tiny(4, lc);
      cfg.augmenter.strategy = "template";
      Rng rng(inst * 10 + lc);
      const auto r = decode(q, {1}, cfg, rng);
      CHECK(r.final.complete());
      REQUIRE(r.reveal_order.size() == 4);
      std::set<std::size_t> pos;
      for (const auto& a : r.reveal_order) pos.insert(a.position - r.final.prompt_len());
      CHECK(pos == std::set<std::size_t>{0, 1, 2, 3});
      CHECK(replay(r.prompt, 4, q.vocab(), r.reveal_order) == r.final);
      CHECK(r.chosen_candidate.has_value() == (lc > 0));
      if (lc > 0) {
        const auto& c = r.pool->collected[*r.chosen_candidate];
        CHECK(std::equal(c.actions.begin(), c.actions.end(), r.reveal_order.begin()));
        CHECK(r.candidate_gain == c.gain);
      }
    }
  }
}

TEST_CASE("decode is byte-identical across reruns") {
  DecodeConfig cfg = tiny(8, 2);
  Rng a(99), b(99);
  const auto ra = to_json(decode(toy_ngram(), {0, 1}, cfg, a)).dump();
  const auto rb = to_json(decode(toy_ngram(), {0, 1}, cfg, b)).dump();
  CHECK(ra == rb);
}

TEST_CASE("search disabled with identity augmentation reduces to the baselines") {
  Rng g(12);
  for (int inst = 0; inst < 5; ++inst) {
    const TabularModel q = oracle::random_joint(g, 3, 4);
    const SeqState root = SeqState::fully_masked({0}, 4, q.vocab());
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      DecodeConfig cfg = tiny(4, 0);
      Rng r1(seed), r2(seed);
      CHECK(actions_of(decode(q, {0}, cfg, r1)) == actions_of(finish_decode(q, root, cfg, r2)));
      cfg.remaining_mode = RemainingMode::argmax;
      Rng r3(seed), r4(seed);
      CHECK(actions_of(decode(q, {0}, cfg, r3)) == actions_of(decode_greedy_baseline(q, {0}, cfg, r4)));
    }
  }
}

TEST_CASE("greedy on independent positions reveals in descending confidence") {
  const FactorizedModel f(3, {{0.5, 0.3, 0.2}, {0.95, 0.03, 0.02}, {0.7, 0.2, 0.1}});
  Rng rng(1);
  const auto r = decode_greedy_baseline(f, {0}, tiny(3, 0), rng);
  std::vector<std::size_t> order;
  for (const auto& a : r.reveal_order) order.push_back(a.position - 1);
  CHECK(order == std::vector<std::size_t>{1, 2, 0});
  for (const auto& a : r.reveal_order) CHECK(a.token == 0);
}

TEST_CASE("the shipped default configuration loads and validates") {
  const DecodeConfig c = load_decode_config(std::string(MEDAL_SOURCE_DIR) + "/configs/default.json");
  CHECK(c.search.init_length == 20);
  CHECK(c.search.k1 == 3);
  CHECK(c.search.k2 == 5);
  CHECK(c.search.candidate_count == 3);
  CHECK(c.search.score.epsilon == 1e-8);
  CHECK(c.search.seed == 1);
  CHECK(c.length == 256);
  CHECK(c.augmenter.subtasks == 3);
  CHECK_NOTHROW(c.validate());
  CHECK(to_json(decode_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("search improves on greedy on the adversarial family") {
  double medal_lp = 0, greedy_lp = 0;
  for (std::uint64_t inst = 0; inst < 5; ++inst) {
    const TabularModel q = adversarial_instance(inst + 1);
    DecodeConfig cfg = tiny(4, 1);
    cfg.remaining_mode = RemainingMode::argmax;
    cfg.search.max_simulations = 0;
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
      Rng a(seed), b(seed);
      medal_lp += std::log(q.prob(decode(q, {0}, cfg, a).final.generation()));
      greedy_lp += std::log(q.prob(decode_greedy_baseline(q, {0}, cfg, b).final.generation()));
    }
  }
  CHECK(medal_lp > greedy_lp);
}
