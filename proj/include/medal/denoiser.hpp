#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "medal/seqcore.hpp"

namespace medal {

/// Logits over content tokens for every masked generation position.
struct DenoiserOutput {
  std::map<std::size_t, std::vector<double>> logits;

  const std::vector<double>& at(std::size_t position) const;
  bool operator==(const DenoiserOutput&) const = default;
};

/// Probability floor used when toy models convert probabilities to logits.
inline constexpr double kLogitFloor = 1e-12;

/// The masked denoiser p_theta. `predict` is the only entry point used by
/// search and decoding; it validates the backend's output and counts calls.
class Denoiser {
 public:
  Denoiser() = default;
  // Copies start with a fresh call counter.
  Denoiser(const Denoiser&) : calls_(0) {}
  Denoiser& operator=(const Denoiser&) { return *this; }
  virtual ~Denoiser() = default;

  virtual const Vocab& vocab() const = 0;

  /// False when calls must be serialized by the caller.
  virtual bool concurrent_safe() const { return true; }

  DenoiserOutput predict(const SeqState& state) const;

  std::uint64_t calls() const noexcept { return calls_.load(std::memory_order_relaxed); }

 protected:
  virtual DenoiserOutput do_predict(const SeqState& state) const = 0;

 private:
  mutable std::atomic<std::uint64_t> calls_{0};
};

/// Explicit joint distribution over V^L for the generation region. The
/// prompt is ignored; conditionals are exact posteriors given every revealed
/// generation token.
class TabularModel final : public Denoiser {
 public:
  static constexpr std::size_t kMaxTableSize = std::size_t{1} << 22;

  TabularModel(std::size_t vocab_size, std::size_t length, std::vector<double> probs);

  static TabularModel from_json(const nlohmann::json& j);
  static TabularModel load(const std::string& path);
  nlohmann::json to_json() const;

  const Vocab& vocab() const override { return vocab_; }
  std::size_t length() const noexcept { return length_; }
  const std::vector<double>& probs() const noexcept { return probs_; }

  /// Table index of a complete assignment (position 0 most significant).
  std::size_t index_of(const std::vector<Token>& assignment) const;
  std::vector<Token> assignment_of(std::size_t index) const;
  double prob(const std::vector<Token>& assignment) const;

  /// Revealed generation tokens of `state` (nullopt where masked).
  std::vector<std::optional<Token>> context_of(const SeqState& state) const;

  /// Probability mass consistent with a partial assignment.
  double context_mass(const std::vector<std::optional<Token>>& context) const;

  /// Exact conditional joint over `subset` (generation-relative indices,
  /// ascending), flattened with the first subset member most significant.
  /// Returns an all-zero vector when the context has zero mass.
  std::vector<double> conditional_joint(const std::vector<std::optional<Token>>& context,
                                        const std::vector<std::size_t>& subset) const;

 protected:
  DenoiserOutput do_predict(const SeqState& state) const override;

 private:
  Vocab vocab_;
  std::size_t length_;
  std::vector<double> probs_;
};

/// Independent per-position distributions; conditionals ignore context.
class FactorizedModel final : public Denoiser {
 public:
  FactorizedModel(std::size_t vocab_size, std::vector<std::vector<double>> per_position);

  const Vocab& vocab() const override { return vocab_; }
  std::size_t length() const noexcept { return per_position_.size(); }
  const std::vector<std::vector<double>>& per_position() const noexcept { return per_position_; }

  /// Product joint as an explicit table.
  TabularModel to_tabular() const;

 protected:
  DenoiserOutput do_predict(const SeqState& state) const override;

 private:
  Vocab vocab_;
  std::vector<std::vector<double>> per_position_;
};

/// Left-context n-gram with additive smoothing. A masked position is
/// conditioned on the longest run of revealed tokens immediately before it,
/// up to n-1 tokens; with none revealed it falls back to the unigram.
class NGramMaskedModel final : public Denoiser {
 public:
  const Vocab& vocab() const override { return vocab_; }
  std::size_t order() const noexcept { return order_; }
  double alpha() const noexcept { return alpha_; }

  /// p(v | context), context given oldest-first with length < order.
  std::vector<double> conditional(const std::vector<Token>& context) const;

 protected:
  DenoiserOutput do_predict(const SeqState& state) const override;

 private:
  friend NGramMaskedModel fit_ngram(const std::vector<std::vector<Token>>&, std::size_t,
                                    double, std::size_t);
  NGramMaskedModel(Vocab vocab, std::size_t order, double alpha);

  std::uint64_t key(const Token* begin, std::size_t len) const;
  const std::vector<double>& cached_logits(const Token* ctx, std::size_t len) const;

  struct Counts {
    std::vector<double> counts;
    double total = 0;
  };

  Vocab vocab_;
  std::size_t order_;
  double alpha_;
  // One table per context length 0..order-1.
  std::vector<std::unordered_map<std::uint64_t, Counts>> tables_;
  std::vector<std::unordered_map<std::uint64_t, std::vector<double>>> logits_;
  std::vector<double> uniform_logits_;
};

/// Fits an n-gram from pre-tokenized sequences. `vocab_size` of 0 infers
/// max token + 1 (at least 2).
NGramMaskedModel fit_ngram(const std::vector<std::vector<Token>>& corpus, std::size_t n,
                           double alpha, std::size_t vocab_size = 0);

/// One whitespace-separated integer sequence per line; blank lines skipped.
std::vector<std::vector<Token>> read_corpus(const std::string& path);

}  // namespace medal
