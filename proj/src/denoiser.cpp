#include "medal/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "medal/error.hpp"

namespace medal {

namespace {

std::vector<double> to_logits(const std::vector<double>& probs) {
  std::vector<double> out(probs.size());
  for (std::size_t v = 0; v < probs.size(); ++v) out[v] = std::log(probs[v] + kLogitFloor);
  return out;
}

std::size_t checked_table_size(std::size_t vocab_size, std::size_t length) {
  std::size_t n = 1;
  for (std::size_t i = 0; i < length; ++i) {
    if (n > TabularModel::kMaxTableSize / vocab_size) {
      throw Error(ErrorKind::InstanceTooLarge, "tabular joint exceeds the size cap");
    }
    n *= vocab_size;
  }
  return n;
}

// Advances a little-endian-last odometer (position length-1 fastest).
void increment(std::vector<Token>& digits, std::size_t base) {
  for (std::size_t i = digits.size(); i-- > 0;) {
    if (static_cast<std::size_t>(++digits[i]) < base) return;
    digits[i] = 0;
  }
}

}  // namespace

const std::vector<double>& DenoiserOutput::at(std::size_t position) const {
  auto it = logits.find(position);
  if (it == logits.end()) throw Error(ErrorKind::MissingPosition, "no logits for position " + std::to_string(position));
  return it->second;
}

DenoiserOutput Denoiser::predict(const SeqState& state) const {
  if (state.complete()) throw Error(ErrorKind::NoMaskedPositions, "predict on a fully resolved state");
  calls_.fetch_add(1, std::memory_order_relaxed);
  DenoiserOutput out = do_predict(state);
  const std::size_t v = vocab().size;
  if (out.logits.size() != state.masked_count()) {
    throw Error(ErrorKind::MissingPosition, "denoiser output does not cover the masked set");
  }
  for (const auto& [pos, row] : out.logits) {
    if (pos >= state.size() || !state.is_masked(pos)) {
      throw Error(ErrorKind::MissingPosition, "denoiser returned logits for unmasked position " + std::to_string(pos));
    }
    if (row.size() != v) throw Error(ErrorKind::InvalidArgument, "logit vector has wrong length");
    for (double x : row) {
      if (!std::isfinite(x)) throw Error(ErrorKind::NonFiniteLogits, "position " + std::to_string(pos));
    }
  }
  return out;
}

// ---- TabularModel --------------------------------------------------------

TabularModel::TabularModel(std::size_t vocab_size, std::size_t length, std::vector<double> probs)
    : vocab_(vocab_size), length_(length), probs_(std::move(probs)) {
  if (length_ == 0) throw Error(ErrorKind::InvalidArgument, "tabular length must be >= 1");
  if (probs_.size() != checked_table_size(vocab_size, length)) {
    throw Error(ErrorKind::InvalidArgument, "tabular joint has the wrong number of entries");
  }
  double total = 0;
  for (double p : probs_) {
    if (!(p >= 0) || !std::isfinite(p)) throw Error(ErrorKind::InvalidArgument, "tabular entries must be finite and >= 0");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-6) throw Error(ErrorKind::InvalidArgument, "tabular joint does not sum to 1");
  for (double& p : probs_) p /= total;
}

TabularModel TabularModel::from_json(const nlohmann::json& j) {
  try {
    const auto v = j.at("vocab_size").get<std::size_t>();
    const auto len = j.at("length").get<std::size_t>();
    if (v < 2) throw Error(ErrorKind::InvalidArgument, "vocab_size must be >= 2");
    std::vector<double> probs(checked_table_size(v, len), 0.0);
    for (const auto& row : j.at("probs")) {
      auto tokens = row.at("tokens").get<std::vector<Token>>();
      if (tokens.size() != len) throw Error(ErrorKind::InvalidArgument, "tuple length differs from length");
      std::size_t idx = 0;
      for (Token t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= v) throw Error(ErrorKind::InvalidArgument, "token out of range");
        idx = idx * v + static_cast<std::size_t>(t);
      }
      probs[idx] += row.at("p").get<double>();
    }
    return TabularModel(v, len, std::move(probs));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, std::string("tabular model file: ") + e.what());
  }
}

TabularModel TabularModel::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidArgument, path + ": " + e.what());
  }
  return from_json(j);
}

nlohmann::json TabularModel::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t i = 0; i < probs_.size(); ++i) {
    if (probs_[i] > 0) rows.push_back({{"tokens", assignment_of(i)}, {"p", probs_[i]}});
  }
  return {{"vocab_size", vocab_.size}, {"length", length_}, {"probs", rows}};
}

std::size_t TabularModel::index_of(const std::vector<Token>& assignment) const {
  if (assignment.size() != length_) throw Error(ErrorKind::InvalidArgument, "assignment length mismatch");
  std::size_t idx = 0;
  for (Token t : assignment) {
    if (!vocab_.is_content(t)) throw Error(ErrorKind::InvalidArgument, "assignment token out of range");
    idx = idx * vocab_.size + static_cast<std::size_t>(t);
  }
  return idx;
}

std::vector<Token> TabularModel::assignment_of(std::size_t index) const {
  std::vector<Token> out(length_);
  for (std::size_t i = length_; i-- > 0;) {
    out[i] = static_cast<Token>(index % vocab_.size);
    index /= vocab_.size;
  }
  return out;
}

double TabularModel::prob(const std::vector<Token>& assignment) const { return probs_[index_of(assignment)]; }

std::vector<std::optional<Token>> TabularModel::context_of(const SeqState& state) const {
  if (state.gen_len() != length_) {
    throw Error(ErrorKind::InvalidArgument, "state generation length " + std::to_string(state.gen_len()) +
                                                " does not match tabular length " + std::to_string(length_));
  }
  std::vector<std::optional<Token>> ctx(length_);
  for (std::size_t i = 0; i < length_; ++i) {
    const std::size_t abs = state.prompt_len() + i;
    if (!state.is_masked(abs)) ctx[i] = state.token(abs);
  }
  return ctx;
}

double TabularModel::context_mass(const std::vector<std::optional<Token>>& context) const {
  std::vector<Token> digits(length_, 0);
  double mass = 0;
  for (std::size_t idx = 0; idx < probs_.size(); ++idx, increment(digits, vocab_.size)) {
    bool ok = true;
    for (std::size_t i = 0; i < length_ && ok; ++i) ok = !context[i] || *context[i] == digits[i];
    if (ok) mass += probs_[idx];
  }
  return mass;
}

std::vector<double> TabularModel::conditional_joint(const std::vector<std::optional<Token>>& context,
                                                    const std::vector<std::size_t>& subset) const {
  std::size_t cells = 1;
  for (std::size_t s : subset) {
    if (s >= length_) throw Error(ErrorKind::InvalidArgument, "subset index out of range");
    cells *= vocab_.size;
  }
  std::vector<double> joint(cells, 0.0);
  std::vector<Token> digits(length_, 0);
  double mass = 0;
  for (std::size_t idx = 0; idx < probs_.size(); ++idx, increment(digits, vocab_.size)) {
    const double p = probs_[idx];
    if (p == 0) continue;
    bool ok = true;
    for (std::size_t i = 0; i < length_ && ok; ++i) ok = !context[i] || *context[i] == digits[i];
    if (!ok) continue;
    std::size_t cell = 0;
    for (std::size_t s : subset) cell = cell * vocab_.size + static_cast<std::size_t>(digits[s]);
    joint[cell] += p;
    mass += p;
  }
  if (mass > 0) {
    for (double& x : joint) x /= mass;
  }
  return joint;
}

DenoiserOutput TabularModel::do_predict(const SeqState& state) const {
  const auto ctx = context_of(state);
  const std::size_t v = vocab_.size;
  std::vector<std::size_t> open;
  for (std::size_t i = 0; i < length_; ++i) {
    if (!ctx[i]) open.push_back(i);
  }
  std::vector<double> acc(open.size() * v, 0.0);
  double mass = 0;
  std::vector<Token> digits(length_, 0);
  for (std::size_t idx = 0; idx < probs_.size(); ++idx, increment(digits, v)) {
    const double p = probs_[idx];
    if (p == 0) continue;
    bool ok = true;
    for (std::size_t i = 0; i < length_ && ok; ++i) ok = !ctx[i] || *ctx[i] == digits[i];
    if (!ok) continue;
    mass += p;
    for (std::size_t k = 0; k < open.size(); ++k) acc[k * v + static_cast<std::size_t>(digits[open[k]])] += p;
  }
  // A zero-mass context leaves every row at the floor, i.e. uniform logits.
  DenoiserOutput out;
  for (std::size_t k = 0; k < open.size(); ++k) {
    std::vector<double> row(acc.begin() + static_cast<std::ptrdiff_t>(k * v),
                            acc.begin() + static_cast<std::ptrdiff_t>((k + 1) * v));
    if (mass > 0) {
      for (double& x : row) x /= mass;
    }
    out.logits.emplace(state.prompt_len() + open[k], to_logits(row));
  }
  return out;
}

// ---- FactorizedModel -----------------------------------------------------

FactorizedModel::FactorizedModel(std::size_t vocab_size, std::vector<std::vector<double>> per_position)
    : vocab_(vocab_size), per_position_(std::move(per_position)) {
  if (per_position_.empty()) throw Error(ErrorKind::InvalidArgument, "factorized model needs >= 1 position");
  for (const auto& row : per_position_) {
    if (row.size() != vocab_size) throw Error(ErrorKind::InvalidArgument, "per-position distribution has wrong size");
    double total = 0;
    for (double p : row) {
      if (!(p >= 0)) throw Error(ErrorKind::InvalidArgument, "negative probability");
      total += p;
    }
    if (std::abs(total - 1.0) > 1e-12) throw Error(ErrorKind::InvalidArgument, "per-position distribution must sum to 1");
  }
}

TabularModel FactorizedModel::to_tabular() const {
  const std::size_t v = vocab_.size;
  const std::size_t n = checked_table_size(v, per_position_.size());
  std::vector<double> probs(n, 1.0);
  std::vector<Token> digits(per_position_.size(), 0);
  for (std::size_t idx = 0; idx < n; ++idx, increment(digits, v)) {
    for (std::size_t i = 0; i < digits.size(); ++i) probs[idx] *= per_position_[i][static_cast<std::size_t>(digits[i])];
  }
  return TabularModel(v, per_position_.size(), std::move(probs));
}

DenoiserOutput FactorizedModel::do_predict(const SeqState& state) const {
  if (state.gen_len() != per_position_.size()) {
    throw Error(ErrorKind::InvalidArgument, "state generation length does not match the factorized model");
  }
  DenoiserOutput out;
  for (std::size_t pos : masked_positions(state)) {
    out.logits.emplace(pos, to_logits(per_position_[pos - state.prompt_len()]));
  }
  return out;
}

// ---- NGramMaskedModel ----------------------------------------------------

NGramMaskedModel::NGramMaskedModel(Vocab vocab, std::size_t order, double alpha)
    : vocab_(vocab), order_(order), alpha_(alpha), tables_(order), logits_(order),
      uniform_logits_(vocab.size, std::log(1.0 / static_cast<double>(vocab.size) + kLogitFloor)) {}

std::uint64_t NGramMaskedModel::key(const Token* begin, std::size_t len) const {
  std::uint64_t k = 0;
  for (std::size_t i = 0; i < len; ++i) k = k * vocab_.size + static_cast<std::uint64_t>(begin[i]);
  return k;
}

std::vector<double> NGramMaskedModel::conditional(const std::vector<Token>& context) const {
  if (context.size() >= order_) throw Error(ErrorKind::InvalidArgument, "context longer than order - 1");
  const std::size_t v = vocab_.size;
  for (Token t : context) {
    if (!vocab_.is_content(t)) throw Error(ErrorKind::InvalidArgument, "context token out of range");
  }
  const auto& table = tables_[context.size()];
  auto it = table.find(key(context.data(), context.size()));
  std::vector<double> p(v, 1.0 / static_cast<double>(v));
  if (it == table.end()) return p;
  const double denom = it->second.total + alpha_ * static_cast<double>(v);
  for (std::size_t t = 0; t < v; ++t) p[t] = (it->second.counts[t] + alpha_) / denom;
  return p;
}

const std::vector<double>& NGramMaskedModel::cached_logits(const Token* ctx, std::size_t len) const {
  const auto& table = logits_[len];
  auto it = table.find(key(ctx, len));
  return it == table.end() ? uniform_logits_ : it->second;
}

DenoiserOutput NGramMaskedModel::do_predict(const SeqState& state) const {
  DenoiserOutput out;
  const auto& tokens = state.tokens();
  for (std::size_t pos : masked_positions(state)) {
    std::size_t len = 0;
    while (len + 1 < order_ && len < pos && !state.is_masked(pos - len - 1)) ++len;
    out.logits.emplace_hint(out.logits.end(), pos, cached_logits(tokens.data() + (pos - len), len));
  }
  return out;
}

NGramMaskedModel fit_ngram(const std::vector<std::vector<Token>>& corpus, std::size_t n, double alpha,
                           std::size_t vocab_size) {
  if (corpus.empty()) throw Error(ErrorKind::EmptyCorpus, "corpus has no sequences");
  if (n < 1) throw Error(ErrorKind::InvalidArgument, "n-gram order must be >= 1");
  if (!(alpha > 0)) throw Error(ErrorKind::InvalidArgument, "smoothing alpha must be > 0");
  std::size_t total_tokens = 0;
  Token max_token = 0;
  for (const auto& seq : corpus) {
    total_tokens += seq.size();
    for (Token t : seq) {
      if (t < 0) throw Error(ErrorKind::InvalidArgument, "negative token in corpus");
      max_token = std::max(max_token, t);
    }
  }
  if (total_tokens == 0) throw Error(ErrorKind::EmptyCorpus, "corpus has no tokens");
  if (vocab_size == 0) vocab_size = std::max<std::size_t>(2, static_cast<std::size_t>(max_token) + 1);
  if (static_cast<std::size_t>(max_token) >= vocab_size) throw Error(ErrorKind::InvalidArgument, "corpus token >= vocab size");
  const double key_space = std::pow(static_cast<double>(vocab_size), static_cast<double>(n - 1));
  if (key_space > 1.8e19) throw Error(ErrorKind::InvalidArgument, "n-gram context keys overflow 64 bits");

  NGramMaskedModel model(Vocab(vocab_size), n, alpha);
  for (const auto& seq : corpus) {
    for (std::size_t pos = 0; pos < seq.size(); ++pos) {
      const auto next = static_cast<std::size_t>(seq[pos]);
      for (std::size_t len = 0; len < n && len <= pos; ++len) {
        auto& c = model.tables_[len][model.key(seq.data() + (pos - len), len)];
        if (c.counts.empty()) c.counts.assign(vocab_size, 0.0);
        c.counts[next] += 1;
        c.total += 1;
      }
    }
  }
  for (std::size_t len = 0; len < n; ++len) {
    for (const auto& [k, c] : model.tables_[len]) {
      std::vector<double> row(vocab_size);
      const double denom = c.total + alpha * static_cast<double>(vocab_size);
      for (std::size_t t = 0; t < vocab_size; ++t) row[t] = std::log((c.counts[t] + alpha) / denom + kLogitFloor);
      model.logits_[len].emplace(k, std::move(row));
    }
  }
  return model;
}

std::vector<std::vector<Token>> read_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  std::vector<std::vector<Token>> corpus;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ss(line);
    std::vector<Token> seq;
    long long t = 0;
    while (ss >> t) seq.push_back(static_cast<Token>(t));
    if (!ss.eof()) throw Error(ErrorKind::InvalidArgument, "non-integer token in " + path);
    if (!seq.empty()) corpus.push_back(std::move(seq));
  }
  return corpus;
}

}  // namespace medal
