#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "medal/denoiser.hpp"
#include "medal/error.hpp"
#include "medal/scoring.hpp"
#include "oracles.hpp"

using namespace medal;

namespace {

TabularModel xor2() {
  // Uniform over {(0,0),(1,1)}.
  return TabularModel(2, 2, {0.5, 0.0, 0.0, 0.5});
}

}  // namespace

TEST_CASE("uniform factorized model gives constant logits") {
  const FactorizedModel m(4, {{0.25, 0.25, 0.25, 0.25}, {0.25, 0.25, 0.25, 0.25}});
  SeqState s = SeqState::fully_masked({1}, 2, m.vocab());
  for (const auto& st : {s, apply_action(s, {1, 3})}) {
    const auto out = m.predict(st);
    for (const auto& [pos, row] : out.logits) {
      for (double p : softmax(row)) CHECK(p == doctest::Approx(0.25).epsilon(1e-12));
    }
  }
}

TEST_CASE("xor table conditions position 1 on position 0") {
  const TabularModel q = xor2();
  const SeqState s = apply_action(SeqState::fully_masked({}, 2, q.vocab()), {0, 0});
  const auto p = softmax(q.predict(s).at(1));
  // Zero mass gets log(0 + 1e-12), so delta = 1e-12 / (1 + 1e-12).
  const double delta = kLogitFloor / (1.0 + kLogitFloor);
  CHECK(p[0] == doctest::Approx(1 - delta).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(delta).epsilon(1e-6));
}

TEST_CASE("fully masked predictions are the exact marginals") {
  const TabularModel q(3, 2, {0.1, 0.2, 0.0, 0.05, 0.15, 0.1, 0.3, 0.0, 0.1});
  const auto out = q.predict(SeqState::fully_masked({}, 2, q.vocab()));
  const std::vector<double> m0{0.3, 0.3, 0.4}, m1{0.45, 0.35, 0.2};
  const auto p0 = softmax(out.at(0)), p1 = softmax(out.at(1));
  for (int v = 0; v < 3; ++v) {
    CHECK(p0[v] == doctest::Approx(m0[v]).epsilon(1e-10));
    CHECK(p1[v] == doctest::Approx(m1[v]).epsilon(1e-10));
  }
}

TEST_CASE("tabular conditionals match brute-force marginalization at every reachable state") {
  Rng rng(5);
  double worst = 0;
  for (std::size_t v = 2; v <= 4; ++v) {
    for (std::size_t len = 1; len <= 4; ++len) {
      if (v == 4 && len == 4) continue;  // keeps the sweep quick; 3^4 covered below
      const TabularModel q = oracle::random_joint(rng, v, len, true);
      for (const auto& s : oracle::all_states(q.vocab(), len)) {
        if (s.complete() || q.context_mass(q.context_of(s)) <= 0) continue;
        const auto out = q.predict(s);
        for (std::size_t pos : masked_positions(s)) {
          const auto want = oracle::conditional(q, s, pos);
          const auto got = softmax(out.at(pos));
          double sum = 0;
          for (std::size_t t = 0; t < v; ++t) {
            worst = std::max(worst, std::abs(want[t] - got[t]));
            sum += got[t];
          }
          CHECK(sum == doctest::Approx(1.0).epsilon(1e-9));
        }
      }
    }
  }
  {
    const TabularModel q = oracle::random_joint(rng, 4, 4);
    for (const auto& s : oracle::all_states(q.vocab(), 4)) {
      if (s.complete() || s.masked_count() < 3) continue;
      const auto out = q.predict(s);
      for (std::size_t pos : masked_positions(s)) {
        const auto want = oracle::conditional(q, s, pos);
        const auto got = softmax(out.at(pos));
        for (std::size_t t = 0; t < 4; ++t) worst = std::max(worst, std::abs(want[t] - got[t]));
      }
    }
  }
  CHECK(worst <= 1e-9);
}

TEST_CASE("predict is pure and counts calls") {
  Rng rng(2);
  const TabularModel q = oracle::random_joint(rng, 3, 3);
  const SeqState s = SeqState::fully_masked({2}, 3, q.vocab());
  const auto before = q.calls();
  CHECK(q.predict(s) == q.predict(s));
  CHECK(q.calls() == before + 2);
}

TEST_CASE("predict on a resolved state is an error") {
  const TabularModel q = xor2();
  SeqState s = SeqState::fully_masked({}, 2, q.vocab());
  s = apply_action(apply_action(s, {0, 1}), {1, 1});
  CHECK_THROWS_AS(q.predict(s), Error);
  try {
    q.predict(s);
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NoMaskedPositions);
  }
}

TEST_CASE("tabular tables validate") {
  CHECK_THROWS_AS(TabularModel(2, 2, {0.5, 0.5}), Error);
  CHECK_THROWS_AS(TabularModel(2, 1, {0.5, 0.6}), Error);
  CHECK_THROWS_AS(TabularModel(2, 1, {-0.1, 1.1}), Error);
}

TEST_CASE("tabular file round trip") {
  const TabularModel q(3, 2, {0.1, 0.2, 0.0, 0.05, 0.15, 0.1, 0.3, 0.0, 0.1});
  const auto j = q.to_json();
  CHECK(j.at("probs").size() == 7);  // zero entries omitted
  const TabularModel back = TabularModel::from_json(j);
  CHECK(back.probs() == q.probs());
  const auto path = std::filesystem::temp_directory_path() / "medal_tabular_roundtrip.json";
  std::ofstream(path) << j.dump();
  CHECK(TabularModel::load(path.string()).probs() == q.probs());
  std::filesystem::remove(path);
}

TEST_CASE("index_of and assignment_of are inverse, position 0 most significant") {
  const TabularModel q(3, 3, std::vector<double>(27, 1.0 / 27));
  CHECK(q.index_of({1, 0, 2}) == 11);
  for (std::size_t i = 0; i < 27; ++i) CHECK(q.index_of(q.assignment_of(i)) == i);
}

TEST_CASE("factorized model embeds as its product table") {
  const FactorizedModel f(2, {{0.3, 0.7}, {0.9, 0.1}});
  const TabularModel t = f.to_tabular();
  CHECK(t.prob({1, 0}) == doctest::Approx(0.63));
  CHECK(t.prob({0, 1}) == doctest::Approx(0.03));
  CHECK_THROWS_AS(FactorizedModel(2, {{0.3, 0.6}}), Error);
}

TEST_CASE("n-gram smoothing by hand count") {
  const auto m = fit_ngram({{0, 1}, {0, 2}}, 2, 1.0, 3);
  const auto p = m.conditional({0});
  CHECK(p[1] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(p[2] == doctest::Approx(0.4).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("n-gram limits in alpha") {
  const auto sharp = fit_ngram({{0, 1}, {0, 1}}, 2, 1e-9, 2);
  CHECK(sharp.conditional({0})[1] == doctest::Approx(1.0).epsilon(1e-8));
  const auto flat = fit_ngram({{0, 1}, {0, 1}}, 2, 1e9, 2);
  CHECK(flat.conditional({0})[1] == doctest::Approx(0.5).epsilon(1e-8));
}

TEST_CASE("n-gram predict uses the left context and falls back to the unigram") {
  const auto m = fit_ngram({{0, 1, 2}, {0, 1, 1}, {2, 2, 0}}, 2, 0.5, 3);
  SeqState s = SeqState::fully_masked({}, 3, m.vocab());
  const auto root = m.predict(s);
  const auto uni = m.conditional({});
  // Unigram counts: 0 x3, 1 x3, 2 x3 -> uniform after smoothing.
  for (int v = 0; v < 3; ++v) CHECK(softmax(root.at(0))[v] == doctest::Approx(uni[v]).epsilon(1e-9));
  s = apply_action(s, {0, 0});
  const auto next = softmax(m.predict(s).at(1));
  const auto want = m.conditional({0});
  for (int v = 0; v < 3; ++v) CHECK(next[v] == doctest::Approx(want[v]).epsilon(1e-9));
  // Counts after 0: 1 twice -> (2 + .5) / (2 + 1.5).
  CHECK(want[1] == doctest::Approx(2.5 / 3.5));
  for (double p : want) CHECK(p > 0);
}

TEST_CASE("n-gram rejects empty corpora") {
  try {
    fit_ngram({}, 2, 1.0);
    FAIL("expected EmptyCorpus");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::EmptyCorpus);
  }
  CHECK_THROWS_AS(fit_ngram({{}}, 2, 1.0), Error);
}

TEST_CASE("vocab size is inferred from the corpus") {
  const auto m = fit_ngram({{0, 4, 2}}, 1, 1.0);
  CHECK(m.vocab().size == 5);
}
