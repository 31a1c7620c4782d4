#include "medal/theory.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "medal/error.hpp"
#include "medal/scoring.hpp"
#include "medal/uct.hpp"

namespace medal {

namespace {

constexpr double kBoundTolerance = 1e-9;

void check_subset(const SeqState& state, const std::vector<std::size_t>& subset) {
  if (subset.empty()) throw Error(ErrorKind::InvalidArgument, "subset must be non-empty");
  for (std::size_t pos : subset) {
    if (pos < state.prompt_len() || pos >= state.size() || !state.is_masked(pos)) {
      throw Error(ErrorKind::SubsetNotMasked, "position " + std::to_string(pos) + " is not masked");
    }
  }
}

std::size_t argmax_index(const std::vector<double>& xs) {
  return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

double proxy_value(const std::vector<double>& probs, ProxyKind kind) {
  switch (kind) {
    case ProxyKind::entropy: return shannon_entropy(probs);
    case ProxyKind::one_minus_confidence: return 1.0 - *std::max_element(probs.begin(), probs.end());
    case ProxyKind::margin: {
      // Larger means less certain, like the other proxies.
      std::vector<double> sorted = probs;
      std::partial_sort(sorted.begin(), sorted.begin() + 2, sorted.end(), std::greater<>());
      return 1.0 - (sorted[0] - sorted[1]);
    }
  }
  return 0;
}

// Subsets of `pool` with size in [lo, hi], each ascending, in lexicographic order.
std::vector<std::vector<std::size_t>> subsets_by_size(const std::vector<std::size_t>& pool, std::size_t lo,
                                                      std::size_t hi) {
  std::vector<std::vector<std::size_t>> out;
  std::vector<std::size_t> cur;
  auto rec = [&](auto&& self, std::size_t start) -> void {
    if (cur.size() >= lo && !cur.empty()) out.push_back(cur);
    if (cur.size() == hi) return;
    for (std::size_t i = start; i < pool.size(); ++i) {
      cur.push_back(pool[i]);
      self(self, i + 1);
      cur.pop_back();
    }
  };
  rec(rec, 0);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> without(const std::vector<std::size_t>& pool, const std::vector<std::size_t>& block) {
  std::vector<std::size_t> out;
  std::set_difference(pool.begin(), pool.end(), block.begin(), block.end(), std::back_inserter(out));
  return out;
}

// Blocks allowed next, given what is still masked and how many steps remain.
std::vector<std::vector<std::size_t>> feasible_blocks(const std::vector<std::size_t>& remaining, std::size_t steps_left,
                                                      const ScheduleSpace& space) {
  if (steps_left == 0) return {};
  if (space.step_size > 0) {
    if (remaining.size() < steps_left * space.step_size) return {};
    return subsets_by_size(remaining, space.step_size, space.step_size);
  }
  if (remaining.size() < steps_left) return {};
  if (steps_left == 1) return {remaining};
  return subsets_by_size(remaining, 1, remaining.size() - (steps_left - 1));
}

void check_enumerable(std::size_t n) {
  if (n > 20) throw Error(ErrorKind::InstanceTooLarge, "too many masked positions to enumerate schedules");
}

}  // namespace

double ScheduleCost::dep_total() const {
  double s = 0;
  for (double d : per_step_dep) s += d;
  return s;
}

void Schedule::validate(const SeqState& root) const {
  std::vector<std::size_t> seen;
  for (const auto& step : steps) {
    check_subset(root, step);
    if (!std::is_sorted(step.begin(), step.end()) || std::adjacent_find(step.begin(), step.end()) != step.end()) {
      throw Error(ErrorKind::InvalidArgument, "schedule steps must be strictly ascending");
    }
    seen.insert(seen.end(), step.begin(), step.end());
  }
  std::sort(seen.begin(), seen.end());
  if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) {
    throw Error(ErrorKind::InvalidArgument, "schedule steps overlap");
  }
}

double entropy_gap(const DenoiserOutput& output, const std::vector<std::size_t>& subset) {
  if (subset.empty()) throw Error(ErrorKind::InvalidArgument, "subset must be non-empty");
  double sum = 0, mx = 0;
  for (std::size_t pos : subset) {
    auto it = output.logits.find(pos);
    if (it == output.logits.end()) throw Error(ErrorKind::SubsetNotMasked, "position " + std::to_string(pos));
    const double h = shannon_entropy(softmax(it->second));
    sum += h;
    mx = std::max(mx, h);
  }
  return sum - mx;
}

double entropy_gap(const Denoiser& model, const SeqState& state, const std::vector<std::size_t>& subset) {
  check_subset(state, subset);
  return entropy_gap(model.predict(state), subset);
}

double dependence_error(const TabularModel& q, const SeqState& state, const std::vector<std::size_t>& subset) {
  check_subset(state, subset);
  const auto ctx = q.context_of(state);
  if (!(q.context_mass(ctx) > 0)) throw Error(ErrorKind::ZeroMassContext, "revealed context has zero probability");
  if (subset.size() == 1) return 0.0;

  std::vector<std::size_t> rel;
  for (std::size_t pos : subset) rel.push_back(pos - state.prompt_len());
  std::sort(rel.begin(), rel.end());
  const std::size_t v = q.vocab().size;
  const std::vector<double> joint = q.conditional_joint(ctx, rel);

  // Marginals of the conditional joint; cell digits are subset order, first most significant.
  std::vector<std::vector<double>> marg(rel.size(), std::vector<double>(v, 0.0));
  std::vector<std::size_t> digits(rel.size(), 0);
  for (std::size_t cell = 0; cell < joint.size(); ++cell) {
    std::size_t rest = cell;
    for (std::size_t k = rel.size(); k-- > 0;) {
      digits[k] = rest % v;
      rest /= v;
    }
    for (std::size_t k = 0; k < rel.size(); ++k) marg[k][digits[k]] += joint[cell];
  }
  double kl = 0;
  for (std::size_t cell = 0; cell < joint.size(); ++cell) {
    const double p = joint[cell];
    if (p <= 0) continue;
    std::size_t rest = cell;
    double prod = 1;
    for (std::size_t k = rel.size(); k-- > 0;) {
      prod *= marg[k][rest % v];
      rest /= v;
    }
    kl += p * std::log(p / prod);
  }
  return std::max(kl, 0.0);
}

SeqState commit_block(const Denoiser& model, const SeqState& state, const std::vector<std::size_t>& block,
                      CostOptions::Commit mode, Rng* rng) {
  if (mode == CostOptions::Commit::sample && rng == nullptr) {
    throw Error(ErrorKind::InvalidArgument, "sampled commitment needs an rng");
  }
  SeqState s = state;
  for (std::size_t pos : block) {
    const auto probs = softmax(model.predict(s).at(pos));
    const std::size_t tok = mode == CostOptions::Commit::argmax ? argmax_index(probs) : rng->categorical(probs);
    s = apply_action(s, {pos, static_cast<Token>(tok)});
  }
  return s;
}

ScheduleCost schedule_cost(const Denoiser& model, const SeqState& root, const Schedule& sched,
                           const TabularModel* truth, const CostOptions& opts, Rng* rng) {
  sched.validate(root);
  ScheduleCost cost;
  SeqState state = root;
  for (const auto& step : sched.steps) {
    const DenoiserOutput out = model.predict(state);
    const double b = entropy_gap(out, step);
    cost.per_step_B.push_back(b);
    cost.J += b;
    for (std::size_t pos : step) cost.model_proxy += proxy_value(softmax(out.at(pos)), opts.proxy);
    if (truth) cost.per_step_dep.push_back(dependence_error(*truth, state, step));
    state = commit_block(model, state, step, opts.commit, rng);
  }
  cost.J_lambda = opts.lambda_dep * cost.J + opts.lambda_mod * cost.model_proxy;
  return cost;
}

std::vector<Schedule> enumerate_schedules(const SeqState& root, const ScheduleSpace& space) {
  if (space.steps < 1) throw Error(ErrorKind::InvalidArgument, "schedule needs >= 1 step");
  const auto positions = masked_positions(root);
  check_enumerable(positions.size());
  std::vector<Schedule> out;
  Schedule cur;
  auto rec = [&](auto&& self, const std::vector<std::size_t>& remaining) -> void {
    if (cur.steps.size() == space.steps) {
      if (out.size() >= kMaxSchedules) throw Error(ErrorKind::InstanceTooLarge, "more than 1e6 schedules");
      out.push_back(cur);
      return;
    }
    for (const auto& block : feasible_blocks(remaining, space.steps - cur.steps.size(), space)) {
      cur.steps.push_back(block);
      self(self, without(remaining, block));
      cur.steps.pop_back();
    }
  };
  rec(rec, positions);
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<Schedule> enumerate_all_schedules(const SeqState& root, std::size_t max_steps) {
  const auto positions = masked_positions(root);
  check_enumerable(positions.size());
  if (max_steps == 0) max_steps = positions.size();
  std::vector<Schedule> out;
  Schedule cur;
  auto rec = [&](auto&& self, const std::vector<std::size_t>& remaining) -> void {
    if (!cur.steps.empty()) {
      if (out.size() >= kMaxSchedules) throw Error(ErrorKind::InstanceTooLarge, "more than 1e6 schedules");
      out.push_back(cur);
    }
    if (cur.steps.size() == max_steps) return;
    for (const auto& block : subsets_by_size(remaining, 1, remaining.size())) {
      cur.steps.push_back(block);
      self(self, without(remaining, block));
      cur.steps.pop_back();
    }
  };
  rec(rec, positions);
  std::sort(out.begin(), out.end());
  return out;
}

ScheduleChoice oracle_min_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space) {
  const auto all = enumerate_schedules(root, space);
  if (all.empty()) throw Error(ErrorKind::InvalidArgument, "no feasible schedule");
  std::optional<ScheduleChoice> best;
  for (const auto& s : all) {
    ScheduleCost c = schedule_cost(model, root, s);
    if (!best || c.J < best->cost.J) best = ScheduleChoice{s, std::move(c)};
  }
  return *best;
}

ScheduleChoice greedy_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space) {
  if (space.steps < 1) throw Error(ErrorKind::InvalidArgument, "schedule needs >= 1 step");
  Schedule sched;
  SeqState state = root;
  std::vector<std::size_t> remaining = masked_positions(root);
  check_enumerable(remaining.size());
  for (std::size_t left = space.steps; left > 0; --left) {
    const auto blocks = feasible_blocks(remaining, left, space);
    if (blocks.empty()) throw Error(ErrorKind::InvalidArgument, "no feasible schedule");
    const DenoiserOutput out = model.predict(state);
    std::size_t best = 0;
    double best_b = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      const double b = entropy_gap(out, blocks[i]);
      if (b < best_b) {
        best_b = b;
        best = i;
      }
    }
    sched.steps.push_back(blocks[best]);
    state = commit_block(model, state, blocks[best], CostOptions::Commit::argmax, nullptr);
    remaining = without(remaining, blocks[best]);
  }
  return {sched, schedule_cost(model, root, sched)};
}

ScheduleChoice random_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space, Rng& rng) {
  const auto all = enumerate_schedules(root, space);
  if (all.empty()) throw Error(ErrorKind::InvalidArgument, "no feasible schedule");
  const auto& pick = all[rng.next() % all.size()];
  return {pick, schedule_cost(model, root, pick)};
}

namespace {

struct SchedData {
  SeqState state;
  std::vector<std::size_t> remaining;
  std::size_t steps_left = 0;
  double cost = 0;  // J accumulated from the root
  Schedule path;
};

using Block = std::vector<std::size_t>;
using SchedNode = TreeNode<SchedData, Block>;

}  // namespace

ScheduleSearchResult search_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space,
                                     std::size_t simulations, double c_explore, Rng& rng) {
  if (space.steps < 1) throw Error(ErrorKind::InvalidArgument, "schedule needs >= 1 step");
  if (simulations < 1) throw Error(ErrorKind::InvalidArgument, "need at least one simulation");
  SchedNode tree(SchedData{root, masked_positions(root), space.steps, 0.0, {}});
  check_enumerable(tree.data.remaining.size());
  if (feasible_blocks(tree.data.remaining, space.steps, space).empty()) {
    throw Error(ErrorKind::InvalidArgument, "no feasible schedule");
  }

  ScheduleSearchResult result;
  double best_cost = std::numeric_limits<double>::infinity();
  auto consider = [&](const Schedule& s, double j) {
    if (j < best_cost) {
      best_cost = j;
      result.best.schedule = s;
    }
  };

  auto make_child = [&](const SchedData& parent, const DenoiserOutput& out, const Block& block) {
    SchedData d;
    d.state = commit_block(model, parent.state, block, CostOptions::Commit::argmax, nullptr);
    d.remaining = without(parent.remaining, block);
    d.steps_left = parent.steps_left - 1;
    d.cost = parent.cost + entropy_gap(out, block);
    d.path = parent.path;
    d.path.steps.push_back(block);
    return d;
  };

  for (std::size_t sim = 0; sim < simulations; ++sim) {
    std::vector<PathStep<SchedNode>> path;
    SchedNode* node = &tree;
    while (node->expanded && !node->edges.empty()) {
      const std::size_t e = ucb_select(*node, c_explore);
      path.emplace_back(node, e);
      node = node->edges[e].child.get();
    }
    if (node->data.steps_left > 0) {
      const DenoiserOutput out = model.predict(node->data.state);
      for (const auto& block : feasible_blocks(node->data.remaining, node->data.steps_left, space)) {
        auto& edge = node->edges.emplace_back();
        edge.action = block;
        edge.prior = -entropy_gap(out, block);
        edge.child = std::make_unique<SchedNode>(make_child(node->data, out, block));
      }
      node->expanded = true;
      const std::size_t e = ucb_select(*node, c_explore);
      path.emplace_back(node, e);
      node = node->edges[e].child.get();
    }
    // Random completion of the remaining steps.
    SchedData sim_state = node->data;
    while (sim_state.steps_left > 0) {
      const auto blocks = feasible_blocks(sim_state.remaining, sim_state.steps_left, space);
      const Block& pick = blocks[rng.next() % blocks.size()];
      const DenoiserOutput out = model.predict(sim_state.state);
      sim_state = make_child(sim_state, out, pick);
    }
    consider(sim_state.path, sim_state.cost);
    backpropagate<SchedNode>(path, -sim_state.cost);
    ++result.simulations;
  }
  result.best.cost = schedule_cost(model, root, result.best.schedule);
  return result;
}

Lemma1Report verify_lemma1(const TabularModel& q, const SeqState& root, const std::vector<Schedule>& schedules) {
  Lemma1Report rep;
  rep.max_slack = -std::numeric_limits<double>::infinity();
  rep.min_slack = std::numeric_limits<double>::infinity();
  for (const auto& s : schedules) {
    Lemma1Row row{s, schedule_cost(q, root, s, &q), 0};
    row.slack = row.cost.J - row.cost.dep_total();
    if (row.slack < -kBoundTolerance) {
      throw Error(ErrorKind::BoundViolated, "cumulative dependence exceeds J on schedule " + to_json(s).dump());
    }
    rep.max_slack = std::max(rep.max_slack, row.slack);
    rep.min_slack = std::min(rep.min_slack, row.slack);
    rep.rows.push_back(std::move(row));
  }
  return rep;
}

double Theorem1Report::final_ratio() const {
  const double j = returned_J.empty() ? 0.0 : returned_J.back();
  if (oracle_J <= 1e-12) return j <= 1e-12 ? 1.0 : std::numeric_limits<double>::infinity();
  return j / oracle_J;
}

Theorem1Report verify_theorem1(const Denoiser& model, const SeqState& root, const ScheduleSpace& space,
                               const std::vector<std::size_t>& budgets, std::uint64_t seed, double c_explore) {
  if (budgets.empty()) throw Error(ErrorKind::InvalidArgument, "need at least one budget");
  Theorem1Report rep;
  rep.budgets = budgets;
  std::sort(rep.budgets.begin(), rep.budgets.end());
  const ScheduleChoice oracle = oracle_min_schedule(model, root, space);
  rep.oracle = oracle.schedule;
  rep.oracle_J = oracle.cost.J;
  rep.greedy_J = greedy_schedule(model, root, space).cost.J;
  Rng baseline_rng(seed ^ 0x5bd1e995ULL);
  rep.random_J = random_schedule(model, root, space, baseline_rng).cost.J;
  for (std::size_t b : rep.budgets) {
    Rng rng(seed);
    const auto res = search_schedule(model, root, space, b, c_explore, rng);
    if (!rep.returned_J.empty() && res.best.cost.J > rep.returned_J.back() + kBoundTolerance) rep.non_increasing = false;
    rep.returned_J.push_back(res.best.cost.J);
    rep.returned.push_back(res.best.schedule);
  }
  rep.beats_greedy = rep.returned_J.back() <= rep.greedy_J + kBoundTolerance;
  rep.beats_random = rep.returned_J.back() <= rep.random_J + kBoundTolerance;
  return rep;
}

nlohmann::json to_json(const Schedule& s) { return s.steps; }

nlohmann::json to_json(const ScheduleCost& c) {
  return {{"per_step_B", c.per_step_B}, {"J", c.J},           {"per_step_dep", c.per_step_dep},
          {"dep_total", c.dep_total()}, {"model_proxy", c.model_proxy}, {"J_lambda", c.J_lambda}};
}

nlohmann::json to_json(const Lemma1Report& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"schedule", to_json(row.schedule)}, {"cost", to_json(row.cost)}, {"slack", row.slack}});
  }
  return {{"rows", rows}, {"max_slack", r.max_slack}, {"min_slack", r.min_slack}};
}

nlohmann::json to_json(const Theorem1Report& r) {
  nlohmann::json returned = nlohmann::json::array();
  for (const auto& s : r.returned) returned.push_back(to_json(s));
  return {{"budgets", r.budgets},         {"returned_J", r.returned_J},   {"returned", returned},
          {"oracle_J", r.oracle_J},       {"oracle", to_json(r.oracle)},  {"greedy_J", r.greedy_J},
          {"random_J", r.random_J},       {"final_ratio", r.final_ratio()}, {"non_increasing", r.non_increasing},
          {"beats_greedy", r.beats_greedy}, {"beats_random", r.beats_random}};
}

}  // namespace medal
