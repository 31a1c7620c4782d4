#include "medal/seqcore.hpp"

#include <algorithm>

#include "medal/error.hpp"
#include "medal/random.hpp"

namespace medal {

std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::PositionNotMasked: return "PositionNotMasked";
    case ErrorKind::TokenIsMask: return "TokenIsMask";
    case ErrorKind::NoMaskedPositions: return "NoMaskedPositions";
    case ErrorKind::NonFiniteLogits: return "NonFiniteLogits";
    case ErrorKind::MissingPosition: return "MissingPosition";
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::ZeroBaselineEntropy: return "ZeroBaselineEntropy";
    case ErrorKind::NoChildren: return "NoChildren";
    case ErrorKind::AlreadyExpanded: return "AlreadyExpanded";
    case ErrorKind::EmptyPool: return "EmptyPool";
    case ErrorKind::SubsetNotMasked: return "SubsetNotMasked";
    case ErrorKind::ZeroMassContext: return "ZeroMassContext";
    case ErrorKind::InstanceTooLarge: return "InstanceTooLarge";
    case ErrorKind::BoundViolated: return "BoundViolated";
    case ErrorKind::Protocol: return "Protocol";
    case ErrorKind::Io: return "Io";
  }
  return "Unknown";
}

std::size_t Rng::categorical(std::span<const double> weights) {
  double total = 0;
  for (double w : weights) total += w;
  if (weights.empty() || !(total > 0)) throw Error(ErrorKind::InvalidArgument, "categorical: no positive weight");
  const double u = uniform() * total;
  double acc = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (u < acc) return i;
  }
  for (std::size_t i = weights.size(); i-- > 0;) {
    if (weights[i] > 0) return i;
  }
  return 0;
}

Vocab::Vocab(std::size_t size_) : size(size_), mask_id(static_cast<Token>(size_)) { validate(); }

Vocab::Vocab(std::size_t size_, Token mask_id_) : size(size_), mask_id(mask_id_) { validate(); }

void Vocab::validate() const {
  if (size < 2) throw Error(ErrorKind::InvalidArgument, "vocab size must be >= 2");
  if (mask_id >= 0 && static_cast<std::size_t>(mask_id) < size) {
    throw Error(ErrorKind::InvalidArgument, "mask_id collides with a content token");
  }
}

SeqState::SeqState(std::size_t prompt_len, std::vector<Token> tokens, std::vector<bool> masked,
                   std::size_t step, Token mask_id)
    : prompt_len_(prompt_len), tokens_(std::move(tokens)), masked_(std::move(masked)), step_(step), mask_id_(mask_id) {
  if (tokens_.size() != masked_.size()) throw Error(ErrorKind::InvalidArgument, "tokens/masked length mismatch");
  if (prompt_len_ > tokens_.size()) throw Error(ErrorKind::InvalidArgument, "prompt_len exceeds sequence length");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (i < prompt_len_ && masked_[i]) throw Error(ErrorKind::InvalidArgument, "prompt position is masked");
    if ((tokens_[i] == mask_id_) != static_cast<bool>(masked_[i])) {
      throw Error(ErrorKind::InvalidArgument, "token/mask flag disagreement at position " + std::to_string(i));
    }
    if (tokens_[i] < 0 && tokens_[i] != mask_id_) throw Error(ErrorKind::InvalidArgument, "negative token id");
    if (masked_[i]) ++masked_count_;
  }
}

SeqState SeqState::fully_masked(const std::vector<Token>& prompt, std::size_t gen_len, const Vocab& vocab) {
  std::vector<Token> tokens(prompt);
  for (Token t : prompt) {
    if (!vocab.is_content(t)) throw Error(ErrorKind::InvalidArgument, "prompt token outside the vocabulary");
  }
  tokens.resize(prompt.size() + gen_len, vocab.mask_id);
  std::vector<bool> masked(tokens.size(), false);
  std::fill(masked.begin() + static_cast<std::ptrdiff_t>(prompt.size()), masked.end(), true);
  return SeqState(prompt.size(), std::move(tokens), std::move(masked), 0, vocab.mask_id);
}

std::vector<Token> SeqState::prompt() const {
  return {tokens_.begin(), tokens_.begin() + static_cast<std::ptrdiff_t>(prompt_len_)};
}

std::vector<Token> SeqState::generation() const {
  return {tokens_.begin() + static_cast<std::ptrdiff_t>(prompt_len_), tokens_.end()};
}

bool SeqState::operator==(const SeqState& other) const {
  return prompt_len_ == other.prompt_len_ && tokens_ == other.tokens_ && masked_ == other.masked_ &&
         mask_id_ == other.mask_id_;
}

SeqState apply_action(const SeqState& state, const UnmaskAction& action) {
  if (action.position < state.prompt_len() || action.position >= state.size() || !state.is_masked(action.position)) {
    throw Error(ErrorKind::PositionNotMasked, "position " + std::to_string(action.position));
  }
  if (action.token == state.mask_id()) throw Error(ErrorKind::TokenIsMask, "cannot commit the mask token");
  if (action.token < 0) throw Error(ErrorKind::InvalidArgument, "negative token id");
  std::vector<Token> tokens = state.tokens();
  std::vector<bool> masked = state.mask_flags();
  tokens[action.position] = action.token;
  masked[action.position] = false;
  return SeqState(state.prompt_len(), std::move(tokens), std::move(masked), state.step() + 1, state.mask_id());
}

std::vector<std::size_t> masked_positions(const SeqState& state) {
  std::vector<std::size_t> out;
  out.reserve(state.masked_count());
  for (std::size_t i = state.prompt_len(); i < state.size(); ++i) {
    if (state.is_masked(i)) out.push_back(i);
  }
  return out;
}

std::size_t SeqStateHash::operator()(const SeqState& s) const noexcept {
  std::size_t h = std::hash<std::size_t>{}(s.prompt_len());
  for (Token t : s.tokens()) h ^= std::hash<Token>{}(t) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  return h;
}

nlohmann::json to_json(const SeqState& state) {
  nlohmann::json masked = nlohmann::json::array();
  for (bool m : state.mask_flags()) masked.push_back(m);
  return {{"prompt_len", state.prompt_len()}, {"tokens", state.tokens()}, {"masked", masked}, {"step", state.step()}};
}

SeqState state_from_json(const nlohmann::json& j, const Vocab& vocab) {
  try {
    auto tokens = j.at("tokens").get<std::vector<Token>>();
    auto masked_raw = j.at("masked").get<std::vector<bool>>();
    std::vector<bool> masked(masked_raw.begin(), masked_raw.end());
    SeqState s(j.at("prompt_len").get<std::size_t>(), std::move(tokens), std::move(masked),
               j.at("step").get<std::size_t>(), vocab.mask_id);
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (!s.is_masked(i) && !vocab.is_content(s.token(i))) {
        throw Error(ErrorKind::InvalidArgument, "token outside the vocabulary at " + std::to_string(i));
      }
    }
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("state file: ") + e.what());
  }
}

nlohmann::json to_json(const Vocab& vocab) { return {{"size", vocab.size}, {"mask_id", vocab.mask_id}}; }

Vocab vocab_from_json(const nlohmann::json& j) {
  try {
    return Vocab(j.at("size").get<std::size_t>(), j.at("mask_id").get<Token>());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("vocab descriptor: ") + e.what());
  }
}

nlohmann::json to_json(const UnmaskAction& a) { return nlohmann::json::array({a.position, a.token}); }

}  // namespace medal
