#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medal/denoiser.hpp"
#include "medal/mcts.hpp"
#include "medal/random.hpp"
#include "medal/seqcore.hpp"

namespace medal {

enum class RemainingMode { sample, argmax };

struct AugmenterConfig {
  std::string strategy = "identity";  // identity | template | self-generate
  std::size_t subtasks = 3;
  std::size_t slot_width = 2;  // tokens per subtask slot in each shot
  std::size_t aux_length = 8;  // self-generate only
  std::vector<Token> template_tokens;  // overrides the built-in template when non-empty

  void validate() const;
};

struct DecodeConfig {
  SearchConfig search;
  std::size_t length = 256;        // L
  std::size_t total_steps = 0;     // T; 0 means exactly enough steps
  double sample_temperature = 1.0;
  RemainingMode remaining_mode = RemainingMode::sample;
  std::size_t tokens_per_step = 1;
  AugmenterConfig augmenter;

  void validate() const;
};

nlohmann::json to_json(const DecodeConfig& cfg);
DecodeConfig decode_config_from_json(const nlohmann::json& j);
DecodeConfig load_decode_config(const std::string& path);

struct StepTrace {
  std::size_t step = 0;
  std::vector<ScoredAction> actions;
};

struct DecodeResult {
  SeqState final;
  std::vector<Token> prompt;  // after augmentation
  std::optional<std::size_t> chosen_candidate;
  std::vector<UnmaskAction> reveal_order;
  std::vector<StepTrace> per_step_scores;
  std::optional<CandidatePool> pool;
  double candidate_gain = 0;
  std::uint64_t model_calls = 0;
};

nlohmann::json to_json(const DecodeResult& r);

/// Fixed two-shot decomposition template with `subtasks` slots per shot.
std::vector<Token> decomposition_template(const AugmenterConfig& cfg, const Vocab& vocab);

std::vector<Token> augment_prompt(const std::vector<Token>& prompt, const AugmenterConfig& cfg,
                                  const Denoiser& model, const DecodeConfig& decode_cfg, Rng& rng);

/// Index of the highest-gain candidate; earliest wins ties.
std::size_t select_candidate(const CandidatePool& pool);

/// Confidence-guided unmasking until no masks remain.
DecodeResult finish_decode(const Denoiser& model, const SeqState& state, const DecodeConfig& cfg,
                           Rng& rng);

DecodeResult decode(const Denoiser& model, const std::vector<Token>& prompt, const DecodeConfig& cfg,
                    Rng& rng);

/// Argmax confidence-guided unmasking from the fully masked root; no search
/// and no augmentation.
DecodeResult decode_greedy_baseline(const Denoiser& model, const std::vector<Token>& prompt,
                                    const DecodeConfig& cfg, Rng& rng);

/// Re-applies `order` to the fully masked root built from `prompt`.
SeqState replay(const std::vector<Token>& prompt, std::size_t length, const Vocab& vocab,
                const std::vector<UnmaskAction>& order);

}  // namespace medal
