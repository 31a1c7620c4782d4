#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medal/denoiser.hpp"
#include "medal/random.hpp"
#include "medal/seqcore.hpp"

namespace medal {

/// Ordered reveal steps; each step is an ascending list of absolute positions.
struct Schedule {
  std::vector<std::vector<std::size_t>> steps;

  auto operator<=>(const Schedule&) const = default;
  void validate(const SeqState& root) const;
};

enum class ProxyKind { entropy, one_minus_confidence, margin };

struct CostOptions {
  enum class Commit { argmax, sample } commit = Commit::argmax;
  double lambda_dep = 1.0;
  double lambda_mod = 0.0;
  ProxyKind proxy = ProxyKind::entropy;
};

struct ScheduleCost {
  std::vector<double> per_step_B;
  double J = 0;
  std::vector<double> per_step_dep;  // only with tabular ground truth
  double model_proxy = 0;            // sum of prox over revealed positions
  double J_lambda = 0;

  double dep_total() const;
};

/// Sum of entropies of `subset` minus their maximum, in nats.
double entropy_gap(const Denoiser& model, const SeqState& state, const std::vector<std::size_t>& subset);
double entropy_gap(const DenoiserOutput& output, const std::vector<std::size_t>& subset);

/// KL between q's joint conditional over `subset` and the product of its
/// conditional marginals, by full enumeration.
double dependence_error(const TabularModel& q, const SeqState& state,
                        const std::vector<std::size_t>& subset);

/// Reveals `block` by committing one position at a time (ascending), each
/// from the model's conditional at the current state.
SeqState commit_block(const Denoiser& model, const SeqState& state, const std::vector<std::size_t>& block,
                      CostOptions::Commit mode, Rng* rng);

ScheduleCost schedule_cost(const Denoiser& model, const SeqState& root, const Schedule& sched,
                           const TabularModel* truth = nullptr, const CostOptions& opts = {},
                           Rng* rng = nullptr);

/// Feasible class S_K. With step_size > 0 every step reveals exactly that
/// many positions and the union need not cover the masked set. With
/// step_size == 0 steps have any non-empty size and together reveal every
/// masked position.
struct ScheduleSpace {
  std::size_t steps = 1;
  std::size_t step_size = 0;
};

inline constexpr std::size_t kMaxSchedules = 1'000'000;

/// All feasible schedules in lexicographic order. Throws InstanceTooLarge
/// past kMaxSchedules.
std::vector<Schedule> enumerate_schedules(const SeqState& root, const ScheduleSpace& space);
/// Every ordered sequence of disjoint non-empty steps (any count, any union).
std::vector<Schedule> enumerate_all_schedules(const SeqState& root, std::size_t max_steps = 0);

struct ScheduleChoice {
  Schedule schedule;
  ScheduleCost cost;
};

ScheduleChoice oracle_min_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space);

/// Myopic baseline: each step takes the feasible block with the smallest B.
ScheduleChoice greedy_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space);

/// Uniformly random feasible schedule.
ScheduleChoice random_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space,
                               Rng& rng);

struct ScheduleSearchResult {
  ScheduleChoice best;
  std::size_t simulations = 0;
};

/// UCT over schedules with reward -J of each rolled-out schedule; returns
/// the cheapest schedule explored.
ScheduleSearchResult search_schedule(const Denoiser& model, const SeqState& root, const ScheduleSpace& space,
                                     std::size_t simulations, double c_explore, Rng& rng);

struct Lemma1Row {
  Schedule schedule;
  ScheduleCost cost;
  double slack = 0;  // J - sum DepErr
};

struct Lemma1Report {
  std::vector<Lemma1Row> rows;
  double max_slack = 0;
  double min_slack = 0;
};

/// Checks sum DepErr <= J + 1e-9 on each schedule with `q` as its own
/// denoiser. Throws BoundViolated naming the first offending schedule.
Lemma1Report verify_lemma1(const TabularModel& q, const SeqState& root, const std::vector<Schedule>& schedules);

struct Theorem1Report {
  std::vector<std::size_t> budgets;
  std::vector<double> returned_J;
  double oracle_J = 0;
  double greedy_J = 0;
  double random_J = 0;
  Schedule oracle;
  std::vector<Schedule> returned;
  bool non_increasing = true;
  bool beats_greedy = true;
  bool beats_random = true;

  /// J(returned at largest budget) / J(oracle); 1 when both vanish.
  double final_ratio() const;
};

Theorem1Report verify_theorem1(const Denoiser& model, const SeqState& root, const ScheduleSpace& space,
                               const std::vector<std::size_t>& budgets, std::uint64_t seed,
                               double c_explore = 1.4142135623730951);

nlohmann::json to_json(const Schedule& s);
nlohmann::json to_json(const ScheduleCost& c);
nlohmann::json to_json(const Lemma1Report& r);
nlohmann::json to_json(const Theorem1Report& r);

}  // namespace medal
