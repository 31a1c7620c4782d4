#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include <json.hpp>

#include "medal/denoiser.hpp"
#include "medal/random.hpp"
#include "medal/reward.hpp"
#include "medal/scoring.hpp"
#include "medal/seqcore.hpp"
#include "medal/uct.hpp"

namespace medal {

enum class RolloutMode { sample, argmax };

struct SearchConfig {
  std::size_t k1 = 3;
  std::size_t k2 = 5;
  ScoreParams score;
  double c_explore = 1.4142135623730951;
  std::size_t candidate_count = 3;  // C
  std::size_t init_length = 20;     // L_c
  std::size_t max_simulations = 0;  // 0 means 64 * C
  std::uint64_t seed = 1;
  RolloutMode rollout = RolloutMode::sample;
  std::size_t rollout_tokens_per_call = 1;
  bool fill_on_exhaustion = true;
  bool parallel_rollouts = false;
  bool record_trace = true;

  std::size_t simulation_budget() const { return max_simulations ? max_simulations : 64 * candidate_count; }
  /// Throws InvalidConfig. `gen_len` of 0 skips the L_c < L check.
  void validate(std::size_t gen_len = 0) const;
};

nlohmann::json to_json(const SearchConfig& cfg);
SearchConfig search_config_from_json(const nlohmann::json& j);

struct NodeData {
  SeqState state;
  double entropy_total = 0;  // total entropy over the state's masked positions
  double reward = 0;         // r_ig of the action that created the node
  bool frozen = false;       // reached L_c; never expanded
  std::optional<SeqState> completion;
  std::size_t id = 0;        // creation order
};

using SearchNode = TreeNode<NodeData, UnmaskAction>;
using SearchPath = std::vector<PathStep<SearchNode>>;

struct Candidate {
  SeqState state;
  double gain = 0;  // cumulative gain from the root
  std::optional<SeqState> completion;
  std::vector<UnmaskAction> actions;  // path from the root
  bool extended = false;              // completed after the budget ran out
};

struct CandidatePool {
  std::vector<Candidate> collected;
  bool budget_exhausted = false;
  std::size_t simulations = 0;
  std::size_t iterations = 0;
  std::vector<nlohmann::json> trace;
};

nlohmann::json to_json(const Candidate& c);

/// Creates one child per pooled action of the confidence filter. The
/// children are not simulated here.
std::vector<SearchNode*> expand(SearchNode& node, const Denoiser& model, const SearchConfig& cfg);
/// Same, reusing a prediction already made for `node`'s state.
std::vector<SearchNode*> expand(SearchNode& node, const DenoiserOutput& output, const SearchConfig& cfg);

struct SimulationResult {
  RewardRecord reward;
  SeqState completion;
};

/// Reward of `action` plus a rollout of every remaining mask.
SimulationResult simulate(const Denoiser& model, const SeqState& state, const UnmaskAction& action,
                          Rng& rng, const SearchConfig& cfg = {});
SimulationResult simulate(const Denoiser& model, const SeqState& state, const EntropyProfile& before,
                          const UnmaskAction& action, Rng& rng, const SearchConfig& cfg);

/// Fills every mask of `state` by the rollout policy.
SeqState rollout(const Denoiser& model, SeqState state, Rng& rng, const SearchConfig& cfg);

/// Called after each iteration with the root of the live tree.
using SearchObserver = std::function<void(const SearchNode& root, const CandidatePool& pool)>;

/// Confidence-guided MCTS from a root whose generation region is fully
/// masked; stops once C candidates with L_c revealed tokens are collected
/// or the simulation budget is spent.
CandidatePool run_cgmcts(const Denoiser& model, const SeqState& root, const SearchConfig& cfg);
CandidatePool run_cgmcts(const Denoiser& model, const SeqState& root, const SearchConfig& cfg,
                         Rng& rng, const SearchObserver& observer = {});

}  // namespace medal
