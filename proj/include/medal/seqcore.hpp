#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

namespace medal {

using Token = std::int32_t;

struct Vocab {
  std::size_t size = 2;
  Token mask_id = 2;

  Vocab() = default;
  /// mask_id defaults to one past the last content token.
  explicit Vocab(std::size_t size_);
  Vocab(std::size_t size_, Token mask_id_);

  bool is_content(Token t) const noexcept {
    return t >= 0 && static_cast<std::size_t>(t) < size && t != mask_id;
  }
  void validate() const;
};

struct UnmaskAction {
  std::size_t position = 0;  // absolute index into prompt + generation
  Token token = 0;

  auto operator<=>(const UnmaskAction&) const = default;
};

/// Partially unmasked sequence: a fixed prompt prefix followed by the
/// generation region. Treated as an immutable value.
class SeqState {
 public:
  SeqState() = default;
  SeqState(std::size_t prompt_len, std::vector<Token> tokens, std::vector<bool> masked,
           std::size_t step, Token mask_id);

  static SeqState fully_masked(const std::vector<Token>& prompt, std::size_t gen_len,
                               const Vocab& vocab);

  std::size_t prompt_len() const noexcept { return prompt_len_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t gen_len() const noexcept { return tokens_.size() - prompt_len_; }
  std::size_t step() const noexcept { return step_; }
  Token mask_id() const noexcept { return mask_id_; }

  const std::vector<Token>& tokens() const noexcept { return tokens_; }
  const std::vector<bool>& mask_flags() const noexcept { return masked_; }
  Token token(std::size_t i) const { return tokens_.at(i); }
  bool is_masked(std::size_t i) const { return masked_.at(i); }

  std::size_t masked_count() const noexcept { return masked_count_; }
  /// Revealed positions in the generation region (the prompt never counts).
  std::size_t revealed_count() const noexcept { return gen_len() - masked_count_; }
  bool complete() const noexcept { return masked_count_ == 0; }

  std::vector<Token> prompt() const;
  std::vector<Token> generation() const;

  bool operator==(const SeqState& other) const;

 private:
  std::size_t prompt_len_ = 0;
  std::vector<Token> tokens_;
  std::vector<bool> masked_;
  std::size_t step_ = 0;
  Token mask_id_ = 0;
  std::size_t masked_count_ = 0;
};

/// Returns a new state with one more revealed position; `state` is untouched.
/// Increments the step counter.
SeqState apply_action(const SeqState& state, const UnmaskAction& action);

/// Ascending absolute indices of masked generation positions.
std::vector<std::size_t> masked_positions(const SeqState& state);

struct SeqStateHash {
  std::size_t operator()(const SeqState& s) const noexcept;
};

// State file format: {"prompt_len", "tokens", "masked", "step"}; the mask id
// comes from a separate vocab descriptor {"size", "mask_id"}.
nlohmann::json to_json(const SeqState& state);
SeqState state_from_json(const nlohmann::json& j, const Vocab& vocab);
nlohmann::json to_json(const Vocab& vocab);
Vocab vocab_from_json(const nlohmann::json& j);
nlohmann::json to_json(const UnmaskAction& a);

}  // namespace medal
