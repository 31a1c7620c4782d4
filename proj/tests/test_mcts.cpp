#include <doctest.h>

#include <cmath>
#include <set>

#include "medal/error.hpp"
#include "medal/mcts.hpp"
#include "medal/reward.hpp"
#include "medal/uct.hpp"
#include "oracles.hpp"

using namespace medal;

namespace {

using Node = TreeNode<int, int>;

void add_edge(Node& n, int action, double prior, std::uint64_t visits, double total) {
  auto& e = n.edges.emplace_back();
  e.action = action;
  e.prior = prior;
  e.visits = visits;
  e.total = total;
  e.child = std::make_unique<Node>();
}

const TabularModel& xor2() {
  static const TabularModel q(2, 2, {0.5, 0.0, 0.0, 0.5});
  return q;
}

SearchConfig small_config() {
  SearchConfig c;
  c.init_length = 1;
  c.candidate_count = 3;
  c.max_simulations = 64;
  return c;
}

}  // namespace

TEST_CASE("ucb picks the less explored child in the worked example") {
  Node n;
  n.visits = 10;
  add_edge(n, 0, 0, 5, 0.6 * 5);
  add_edge(n, 1, 0, 8, 0.8 * 8);
  const double c = 1.41421356;
  const double u1 = 0.6 + c * std::sqrt(std::log(10.0) / 5), u2 = 0.8 + c * std::sqrt(std::log(10.0) / 8);
  CHECK(u1 == doctest::Approx(1.5596).epsilon(1e-4));
  CHECK(u2 == doctest::Approx(1.5588).epsilon(1e-4));
  CHECK(ucb_select(n, c) == 0);
  CHECK(ucb_select(n, 0.0) == 1);
}

TEST_CASE("unvisited children win, ordered by prior then action") {
  Node n;
  n.visits = 101;
  add_edge(n, 0, 0.9, 100, 100.0);
  add_edge(n, 1, 0.2, 0, 0.0);
  CHECK(ucb_select(n, 1.0) == 1);
  add_edge(n, 2, 0.5, 0, 0.0);
  CHECK(ucb_select(n, 1.0) == 2);
  add_edge(n, -1, 0.5, 0, 0.0);
  CHECK(ucb_select(n, 1.0) == 3);
}

TEST_CASE("selection on a leaf is an error") {
  Node n;
  try {
    ucb_select(n, 1.0);
    FAIL("expected NoChildren");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NoChildren);
  }
}

TEST_CASE("backpropagation keeps running means and commutes") {
  Node a;
  add_edge(a, 0, 0, 0, 0);
  std::vector<PathStep<Node>> path{{&a, 0}};
  backpropagate<Node>(path, 0.7);
  CHECK(a.edges[0].mean() == doctest::Approx(0.7));
  CHECK(a.edges[0].visits == 1);

  Node b;
  add_edge(b, 0, 0, 4, 2.0);
  b.visits = 5;
  std::vector<PathStep<Node>> pb{{&b, 0}};
  backpropagate<Node>(pb, 1.0);
  CHECK(b.edges[0].mean() == doctest::Approx(0.6));
  CHECK(visit_counts_consistent(b));

  Node x, y;
  add_edge(x, 0, 0, 0, 0);
  add_edge(y, 0, 0, 0, 0);
  std::vector<PathStep<Node>> px{{&x, 0}}, py{{&y, 0}};
  backpropagate<Node>(px, 0.25);
  backpropagate<Node>(px, 0.5);
  backpropagate<Node>(py, 0.5);
  backpropagate<Node>(py, 0.25);
  CHECK(x.edges[0].visits == y.edges[0].visits);
  CHECK(x.edges[0].total == y.edges[0].total);
  CHECK(x.visits == y.visits);
}

TEST_CASE("expansion creates one child per pooled action") {
  Rng rng(4);
  const TabularModel q = oracle::random_joint(rng, 4, 3);
  SearchConfig cfg;
  SearchNode root(NodeData{SeqState::fully_masked({}, 3, q.vocab()), 0, 0, false, std::nullopt, 0});
  const auto kids = expand(root, q, cfg);
  CHECK(kids.size() == 5);
  CHECK(root.expanded);

  // Brute-force top-K2 from the raw scores.
  const auto out = q.predict(root.data.state);
  std::vector<std::pair<std::size_t, std::vector<double>>> scores;
  for (const auto& [pos, l] : out.logits) scores.emplace_back(pos, score_position(l, cfg.score, pos).scores);
  const auto want = oracle::brute_pool(scores, cfg.k1, cfg.k2);
  for (std::size_t i = 0; i < kids.size(); ++i) {
    const auto& a = root.edges[i].action;
    CHECK(std::make_pair(a.position, a.token) == want[i]);
    CHECK(kids[i]->data.state == apply_action(root.data.state, a));
  }
  try {
    expand(root, q, cfg);
    FAIL("expected AlreadyExpanded");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::AlreadyExpanded);
  }
}

TEST_CASE("expansion with one masked position yields at most K1 children") {
  Rng rng(4);
  const TabularModel q = oracle::random_joint(rng, 4, 2);
  SearchConfig cfg;
  SearchNode node(NodeData{apply_action(SeqState::fully_masked({}, 2, q.vocab()), {0, 1}), 0, 0, false, std::nullopt, 0});
  CHECK(expand(node, q, cfg).size() == 3);

  SeqState full = apply_action(node.data.state, {1, 0});
  SearchNode done(NodeData{full, 0, 0, false, std::nullopt, 0});
  CHECK_THROWS_AS(expand(done, q, cfg), Error);
}

TEST_CASE("simulation with one mask left costs one call and earns reward one") {
  Rng rng(9);
  const TabularModel q = oracle::random_joint(rng, 3, 2);
  const SeqState s = apply_action(SeqState::fully_masked({}, 2, q.vocab()), {1, 2});
  const auto before = q.calls();
  Rng sim(1);
  const auto r = simulate(q, s, {0, 1}, sim);
  CHECK(q.calls() - before == 1);
  CHECK(r.reward.r_ig == 1.0);
  CHECK(r.completion.complete());
  CHECK(r.completion.token(0) == 1);
}

TEST_CASE("argmax rollout on xor follows the revealed token") {
  SearchConfig cfg;
  cfg.rollout = RolloutMode::argmax;
  Rng rng(1);
  const auto r = simulate(xor2(), SeqState::fully_masked({}, 2, xor2().vocab()), {0, 0}, rng, cfg);
  CHECK(r.completion.generation() == std::vector<Token>{0, 0});
}

TEST_CASE("sampled rollouts are reproducible from the seed") {
  Rng g(12);
  const TabularModel q = oracle::random_joint(g, 3, 4);
  const SeqState s = SeqState::fully_masked({1, 2}, 4, q.vocab());
  Rng a(77), b(77);
  const auto ra = simulate(q, s, {3, 0}, a);
  const auto rb = simulate(q, s, {3, 0}, b);
  CHECK(ra.completion == rb.completion);
  CHECK(ra.reward.r_ig == rb.reward.r_ig);
  // The reward matches the standalone reward computation.
  CHECK(ra.reward.r_ig == doctest::Approx(info_gain(q, s, {3, 0}).r_ig).epsilon(1e-15));
}

TEST_CASE("depth-one collection fills in a single iteration") {
  Rng g(2);
  const TabularModel q = oracle::random_joint(g, 3, 3);
  SearchConfig cfg = small_config();
  cfg.candidate_count = cfg.k2;
  const auto pool = run_cgmcts(q, SeqState::fully_masked({}, 3, q.vocab()), cfg);
  CHECK(pool.collected.size() == 5);
  CHECK(pool.iterations == 1);
  CHECK(pool.simulations == 5);
  CHECK_FALSE(pool.budget_exhausted);
}

TEST_CASE("a budget of one collects exactly one candidate") {
  Rng g(2);
  const TabularModel q = oracle::random_joint(g, 3, 3);
  SearchConfig cfg = small_config();
  cfg.candidate_count = 1;
  cfg.max_simulations = 1;
  const auto pool = run_cgmcts(q, SeqState::fully_masked({}, 3, q.vocab()), cfg);
  CHECK(pool.collected.size() == 1);
  CHECK(pool.simulations == 1);
  CHECK(pool.iterations == 1);
}

TEST_CASE("pool entries have L_c reveals, replay from their actions and carry their gain") {
  Rng g(31);
  for (int inst = 0; inst < 5; ++inst) {
    const TabularModel q = oracle::random_joint(g, 3, 4);
    const SeqState root = SeqState::fully_masked({0}, 4, q.vocab());
    SearchConfig cfg = small_config();
    cfg.init_length = 2;
    cfg.seed = 100 + inst;
    bool consistent = true;
    const auto pool = run_cgmcts(q, root, cfg, *std::make_unique<Rng>(cfg.seed),
                                 [&](const SearchNode& r, const CandidatePool&) {
                                   consistent = consistent && visit_counts_consistent(r);
                                 });
    CHECK(consistent);
    CHECK(pool.collected.size() <= cfg.candidate_count);
    std::set<std::vector<Token>> seen;
    for (const auto& c : pool.collected) {
      CHECK(c.state.revealed_count() == 2);
      SeqState s = root;
      for (const auto& a : c.actions) s = apply_action(s, a);
      CHECK(s == c.state);
      CHECK(c.gain == doctest::Approx(cumulative_gain(q, root, c.state)).epsilon(1e-12));
      CHECK(seen.insert(c.state.tokens()).second);
      if (c.completion) {
        CHECK(c.completion->complete());
        CHECK(reachable_by_unmasking(c.state, *c.completion));
      }
    }
  }
}

TEST_CASE("trace lines carry the documented keys") {
  Rng g(2);
  const TabularModel q = oracle::random_joint(g, 3, 3);
  SearchConfig cfg = small_config();
  cfg.init_length = 2;
  const auto pool = run_cgmcts(q, SeqState::fully_masked({}, 3, q.vocab()), cfg);
  REQUIRE(pool.trace.size() == pool.iterations);
  for (const auto& line : pool.trace) {
    for (const char* k : {"iter", "selected_path", "expanded_actions", "reward", "pool_size"}) CHECK(line.contains(k));
  }
  CHECK(pool.trace.front().at("selected_path").empty());
  CHECK(pool.trace.front().at("expanded_actions").size() == 5);
}

TEST_CASE("generous search finds the best depth-2 prefix of a small table") {
  Rng g(41);
  for (int inst = 0; inst < 3; ++inst) {
    const TabularModel q = oracle::random_joint(g, 3, 3);
    const SeqState root = SeqState::fully_masked({}, 3, q.vocab());
    // Exhaustive oracle over every state with two reveals.
    double best = -1e300;
    std::size_t prefixes = 0;
    for (const auto& s : oracle::all_states(q.vocab(), 3)) {
      if (s.revealed_count() != 2) continue;
      ++prefixes;
      const double h0 = oracle::total_entropy(q, root);
      best = std::max(best, (h0 - oracle::total_entropy(q, s)) / h0);
    }
    CHECK(prefixes == 27);
    SearchConfig cfg;
    cfg.k1 = 3;
    cfg.k2 = 9;  // the filter admits every action
    cfg.init_length = 2;
    cfg.candidate_count = 27;
    cfg.max_simulations = 20000;
    cfg.fill_on_exhaustion = false;
    const auto pool = run_cgmcts(q, root, cfg);
    double found = -1e300;
    for (const auto& c : pool.collected) found = std::max(found, c.gain);
    CHECK(found == doctest::Approx(best).epsilon(1e-9));
  }
}

TEST_CASE("every root action is visited under a large budget") {
  Rng g(5);
  const TabularModel q = oracle::random_joint(g, 3, 4);
  SearchConfig cfg;
  cfg.init_length = 3;
  cfg.candidate_count = 200;  // never fills, so the whole budget is spent
  cfg.max_simulations = 400;
  cfg.fill_on_exhaustion = false;
  std::vector<std::uint64_t> visits;
  run_cgmcts(q, SeqState::fully_masked({}, 4, q.vocab()), cfg, *std::make_unique<Rng>(1),
             [&](const SearchNode& r, const CandidatePool&) {
               visits.clear();
               for (const auto& e : r.edges) visits.push_back(e.visits);
             });
  REQUIRE(visits.size() == 5);
  for (auto v : visits) CHECK(v >= 1);
}

TEST_CASE("best pooled gain is non-decreasing in nested budgets") {
  Rng g(13);
  for (int inst = 0; inst < 6; ++inst) {
    const TabularModel q = oracle::random_joint(g, 3, 4);
    const SeqState root = SeqState::fully_masked({}, 4, q.vocab());
    double prev = -1e300;
    for (std::size_t budget : {3, 6, 12, 24, 48, 96}) {
      SearchConfig cfg;
      cfg.init_length = 2;
      cfg.candidate_count = 3;
      cfg.max_simulations = budget;
      cfg.fill_on_exhaustion = false;
      cfg.seed = 7 + inst;
      const auto pool = run_cgmcts(q, root, cfg);
      double best = -1e300;
      for (const auto& c : pool.collected) best = std::max(best, c.gain);
      CHECK(best >= prev - 1e-12);
      prev = best;
    }
  }
}

TEST_CASE("parallel rollouts reproduce the serial pool") {
  Rng g(3);
  const TabularModel q = oracle::random_joint(g, 3, 4);
  const SeqState root = SeqState::fully_masked({2}, 4, q.vocab());
  SearchConfig cfg;
  cfg.init_length = 2;
  cfg.seed = 5;
  const auto serial = run_cgmcts(q, root, cfg);
  cfg.parallel_rollouts = true;
  const auto parallel = run_cgmcts(q, root, cfg);
  REQUIRE(serial.collected.size() == parallel.collected.size());
  for (std::size_t i = 0; i < serial.collected.size(); ++i) {
    CHECK(to_json(serial.collected[i]) == to_json(parallel.collected[i]));
  }
  CHECK(serial.trace == parallel.trace);
}

TEST_CASE("exhausted budgets are flagged and topped up by extension") {
  Rng g(3);
  const TabularModel q = oracle::random_joint(g, 3, 4);
  const SeqState root = SeqState::fully_masked({}, 4, q.vocab());
  SearchConfig cfg;
  cfg.init_length = 3;
  cfg.candidate_count = 3;
  cfg.max_simulations = 3;
  cfg.fill_on_exhaustion = false;
  const auto partial = run_cgmcts(q, root, cfg);
  CHECK(partial.budget_exhausted);
  CHECK(partial.collected.empty());
  cfg.fill_on_exhaustion = true;
  const auto filled = run_cgmcts(q, root, cfg);
  CHECK(filled.budget_exhausted);
  REQUIRE(filled.collected.size() == 3);
  for (const auto& c : filled.collected) {
    CHECK(c.extended);
    CHECK(c.state.revealed_count() == 3);
  }
}

TEST_CASE("search preconditions") {
  Rng g(3);
  const TabularModel q = oracle::random_joint(g, 3, 3);
  const SeqState root = SeqState::fully_masked({}, 3, q.vocab());
  SearchConfig cfg;
  cfg.init_length = 3;  // must be < L
  CHECK_THROWS_AS(run_cgmcts(q, root, cfg), Error);
  cfg.init_length = 1;
  CHECK_THROWS_AS(run_cgmcts(q, apply_action(root, {0, 0}), cfg), Error);
  cfg.candidate_count = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg.candidate_count = 4;
  cfg.max_simulations = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("search config json round trip and strict keys") {
  SearchConfig c;
  c.k2 = 7;
  c.rollout = RolloutMode::argmax;
  c.max_simulations = 50;
  const auto back = search_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));
  CHECK(to_json(SearchConfig{}).at("max_simulations") == 192);
  CHECK_THROWS_AS(search_config_from_json({{"bogus", 1}}), Error);
  CHECK_THROWS_AS(search_config_from_json({{"rollout", "beam"}}), Error);
}
