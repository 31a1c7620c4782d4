#include "medal/scoring.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "medal/error.hpp"

namespace medal {

std::vector<double> softmax(std::span<const double> logits) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : logits) mx = std::max(mx, x);
  std::vector<double> p(logits.size());
  double z = 0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - mx);
    z += p[i];
  }
  for (double& x : p) x /= z;
  return p;
}

double shannon_entropy(std::span<const double> probs) {
  double h = 0;
  for (double p : probs) {
    if (p > 0) h -= p * std::log(p);
  }
  return std::clamp(h, 0.0, std::log(static_cast<double>(probs.size())));
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

std::size_t PositionScore::best_token() const {
  return static_cast<std::size_t>(std::max_element(scores.begin(), scores.end()) - scores.begin());
}

PositionScore score_position(std::span<const double> logits, const ScoreParams& params, std::size_t position) {
  if (logits.size() < 2) throw Error(ErrorKind::InvalidArgument, "need at least two logits");
  if (!(params.gamma > 0) || !(params.epsilon > 0)) throw Error(ErrorKind::InvalidArgument, "gamma and epsilon must be > 0");
  for (double x : logits) {
    if (!std::isfinite(x)) throw Error(ErrorKind::NonFiniteLogits, "position " + std::to_string(position));
  }
  PositionScore s;
  s.position = position;
  s.probs = softmax(logits);

  double h = 0;
  for (double p : s.probs) h -= p * std::log(p + params.epsilon);
  s.entropy = std::clamp(h, 0.0, std::log(static_cast<double>(s.probs.size())));
  s.ent_penalty = params.entropy_penalty ? std::exp(-s.entropy) : 1.0;

  double first = -1, second = -1;
  for (double p : s.probs) {
    if (p > first) {
      second = first;
      first = p;
    } else if (p > second) {
      second = p;
    }
  }
  s.top2_margin = first - second;
  s.margin_factor = params.margin_factor ? sigmoid(params.gamma * s.top2_margin) : 1.0;

  const double factor = s.ent_penalty * s.margin_factor;
  s.scores.resize(s.probs.size());
  for (std::size_t v = 0; v < s.probs.size(); ++v) s.scores[v] = s.probs[v] * factor;
  return s;
}

bool ranks_before(const ScoredAction& a, const ScoredAction& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.action.position != b.action.position) return a.action.position < b.action.position;
  return a.action.token < b.action.token;
}

ActionCandidates build_candidates(const SeqState& state, const DenoiserOutput& output, std::size_t k1,
                                  std::size_t k2, const ScoreParams& params) {
  if (k1 < 1 || k2 < 1) throw Error(ErrorKind::InvalidArgument, "k1 and k2 must be >= 1");
  ActionCandidates out;
  std::vector<ScoredAction> all;
  for (std::size_t pos : masked_positions(state)) {
    const PositionScore ps = score_position(output.at(pos), params, pos);
    std::vector<ScoredAction> row;
    row.reserve(ps.scores.size());
    for (std::size_t v = 0; v < ps.scores.size(); ++v) {
      row.push_back({{pos, static_cast<Token>(v)}, ps.scores[v], ps.probs[v]});
    }
    const std::size_t keep = std::min(k1, row.size());
    std::partial_sort(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(keep), row.end(), ranks_before);
    row.resize(keep);
    all.insert(all.end(), row.begin(), row.end());
    out.per_position.emplace(pos, std::move(row));
  }
  const std::size_t keep = std::min(k2, all.size());
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(keep), all.end(), ranks_before);
  all.resize(keep);
  out.pooled = std::move(all);
  return out;
}

nlohmann::json to_json(const PositionScore& s) {
  return {{"position", s.position},       {"probs", s.probs},
          {"entropy", s.entropy},         {"ent_penalty", s.ent_penalty},
          {"top2_margin", s.top2_margin}, {"margin_factor", s.margin_factor},
          {"scores", s.scores}};
}

nlohmann::json to_json(const ScoredAction& a) {
  return {{"position", a.action.position}, {"token", a.action.token}, {"score", a.score}, {"prob", a.prob}};
}

}  // namespace medal
