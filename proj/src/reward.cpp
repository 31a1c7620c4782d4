#include "medal/reward.hpp"

#include <algorithm>
#include <cmath>

#include "medal/error.hpp"
#include "medal/scoring.hpp"

namespace medal {

namespace {

// A distribution that is one-hot up to the toy-model logit floor counts as
// certain; otherwise the floor leaves ~3e-11 nats per token behind.
bool floor_one_hot(const std::vector<double>& probs) {
  double top = 0;
  for (double q : probs) top = std::max(top, q);
  return 1.0 - top <= 2.0 * kLogitFloor * static_cast<double>(probs.size());
}

}  // namespace

EntropyProfile entropy_profile(const DenoiserOutput& output) {
  EntropyProfile p;
  for (const auto& [pos, logits] : output.logits) {
    const auto probs = softmax(logits);
    const double h = floor_one_hot(probs) ? 0.0 : shannon_entropy(probs);
    p.per_position.emplace(pos, h);
    p.total += h;
  }
  return p;
}

EntropyProfile entropy_profile(const Denoiser& model, const SeqState& state) {
  if (state.complete()) return {};
  return entropy_profile(model.predict(state));
}

double gain_ratio(double before_total, double after_total) {
  if (std::isnan(before_total) || std::isnan(after_total) || before_total < 0 || after_total < 0) {
    throw Error(ErrorKind::ZeroBaselineEntropy, "entropy totals must be finite and non-negative");
  }
  if (before_total <= kZeroEntropy) return 1.0;
  return (before_total - after_total) / before_total;
}

RewardRecord info_gain(const Denoiser& model, const SeqState& state, const UnmaskAction& action) {
  if (state.complete()) throw Error(ErrorKind::NoMaskedPositions, "info_gain on a fully resolved state");
  return info_gain(model, state, entropy_profile(model, state), action);
}

RewardRecord info_gain(const Denoiser& model, const SeqState& state, const EntropyProfile& before,
                       const UnmaskAction& action) {
  RewardRecord r;
  r.action = action;
  r.before = before;
  const SeqState next = apply_action(state, action);
  r.after = entropy_profile(model, next);
  r.r_ig = gain_ratio(before.total, r.after.total);
  return r;
}

bool reachable_by_unmasking(const SeqState& root, const SeqState& candidate) {
  if (root.prompt_len() != candidate.prompt_len() || root.size() != candidate.size() ||
      root.mask_id() != candidate.mask_id()) {
    return false;
  }
  for (std::size_t i = 0; i < root.size(); ++i) {
    if (!root.is_masked(i) && (candidate.is_masked(i) || candidate.token(i) != root.token(i))) return false;
  }
  return true;
}

double cumulative_gain(const EntropyProfile& root, const SeqState& root_state, const EntropyProfile& candidate,
                       const SeqState& candidate_state) {
  if (!reachable_by_unmasking(root_state, candidate_state)) {
    throw Error(ErrorKind::InvalidArgument, "candidate is not reachable from the root by unmasking");
  }
  if (candidate_state.masked_count() == root_state.masked_count()) return 0.0;
  return gain_ratio(root.total, candidate.total);
}

double cumulative_gain(const Denoiser& model, const SeqState& root, const SeqState& candidate) {
  if (!reachable_by_unmasking(root, candidate)) {
    throw Error(ErrorKind::InvalidArgument, "candidate is not reachable from the root by unmasking");
  }
  if (candidate.masked_count() == root.masked_count()) return 0.0;
  return cumulative_gain(entropy_profile(model, root), root, entropy_profile(model, candidate), candidate);
}

nlohmann::json to_json(const EntropyProfile& p) {
  nlohmann::json per = nlohmann::json::object();
  for (const auto& [pos, h] : p.per_position) per[std::to_string(pos)] = h;
  return {{"per_position", per}, {"total", p.total}};
}

nlohmann::json to_json(const RewardRecord& r) {
  return {{"action", to_json(r.action)}, {"r_ig", r.r_ig}, {"before", to_json(r.before)}, {"after", to_json(r.after)}};
}

}  // namespace medal
