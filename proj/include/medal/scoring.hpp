#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <vector>

#include <json.hpp>

#include "medal/denoiser.hpp"
#include "medal/seqcore.hpp"

namespace medal {

struct ScoreParams {
  double gamma = 5.0;
  double epsilon = 1e-8;
  // Ablation switches; both on reproduces the confidence-adjusted score.
  bool entropy_penalty = true;
  bool margin_factor = true;
};

std::vector<double> softmax(std::span<const double> logits);

/// Shannon entropy in nats (0 log 0 = 0), clamped to [0, ln n].
double shannon_entropy(std::span<const double> probs);

double sigmoid(double x);

struct PositionScore {
  std::size_t position = 0;
  std::vector<double> probs;
  double entropy = 0;        // -sum p log(p + eps), clamped to [0, ln|V|]
  double ent_penalty = 1;    // exp(-entropy)
  double top2_margin = 0;    // p(1) - p(2)
  double margin_factor = 1;  // sigmoid(gamma * margin)
  std::vector<double> scores;

  std::size_t best_token() const;
};

PositionScore score_position(std::span<const double> logits, const ScoreParams& params,
                             std::size_t position = 0);

struct ScoredAction {
  UnmaskAction action;
  double score = 0;
  double prob = 0;
};

/// Strict ordering used for every top-K: higher score first, then lower
/// position, then lower token.
bool ranks_before(const ScoredAction& a, const ScoredAction& b);

struct ActionCandidates {
  std::map<std::size_t, std::vector<ScoredAction>> per_position;  // top-K1 each
  std::vector<ScoredAction> pooled;                               // top-K2 of the union
};

ActionCandidates build_candidates(const SeqState& state, const DenoiserOutput& output,
                                  std::size_t k1, std::size_t k2, const ScoreParams& params);

nlohmann::json to_json(const PositionScore& s);
nlohmann::json to_json(const ScoredAction& a);

}  // namespace medal
