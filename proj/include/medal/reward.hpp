#pragma once

#include <map>

#include <json.hpp>

#include "medal/denoiser.hpp"
#include "medal/seqcore.hpp"

namespace medal {

/// Baseline totals at or below this are treated as already certain.
inline constexpr double kZeroEntropy = 1e-12;

struct EntropyProfile {
  std::map<std::size_t, double> per_position;  // nats
  double total = 0;
};

EntropyProfile entropy_profile(const DenoiserOutput& output);
/// Empty profile for a fully resolved state (no model call).
EntropyProfile entropy_profile(const Denoiser& model, const SeqState& state);

struct RewardRecord {
  UnmaskAction action;
  double r_ig = 0;
  EntropyProfile before;
  EntropyProfile after;
};

/// (before - after) / before. A certain baseline yields 1: any action is
/// equally conclusive there. Throws ZeroBaselineEntropy on NaN or negative
/// totals.
double gain_ratio(double before_total, double after_total);

/// Normalized entropy reduction over the remaining masked positions caused
/// by one unmasking action. The filled position is excluded from `after`.
RewardRecord info_gain(const Denoiser& model, const SeqState& state, const UnmaskAction& action);
RewardRecord info_gain(const Denoiser& model, const SeqState& state, const EntropyProfile& before,
                       const UnmaskAction& action);

/// Gain from `root` to `candidate` on the root's baseline. `candidate` must
/// be reachable from `root` by unmasking only.
double cumulative_gain(const Denoiser& model, const SeqState& root, const SeqState& candidate);
double cumulative_gain(const EntropyProfile& root, const SeqState& root_state,
                       const EntropyProfile& candidate, const SeqState& candidate_state);

bool reachable_by_unmasking(const SeqState& root, const SeqState& candidate);

nlohmann::json to_json(const EntropyProfile& p);
nlohmann::json to_json(const RewardRecord& r);

}  // namespace medal
