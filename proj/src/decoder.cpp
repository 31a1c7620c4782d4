#include "medal/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "medal/error.hpp"

namespace medal {

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

const char* mode_name(RemainingMode m) { return m == RemainingMode::argmax ? "argmax" : "sample"; }

RemainingMode mode_from_name(const std::string& s) {
  if (s == "sample") return RemainingMode::sample;
  if (s == "argmax") return RemainingMode::argmax;
  throw Error(ErrorKind::InvalidConfig, "unknown remaining_mode '" + s + "'");
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; })) {
      throw Error(ErrorKind::InvalidConfig, std::string("unknown ") + what + " field '" + key + "'");
    }
  }
}

// Picks up to `k` actions at distinct positions for one remaining step.
std::vector<ScoredAction> choose_step_actions(const ActionCandidates& cands, std::size_t k, const DecodeConfig& cfg,
                                              Rng& rng) {
  std::vector<ScoredAction> pool = cands.pooled;
  std::vector<ScoredAction> chosen;
  std::set<std::size_t> used;
  while (chosen.size() < k && !pool.empty()) {
    std::size_t idx = 0;
    if (cfg.remaining_mode == RemainingMode::sample) {
      double smax = pool.front().score;
      for (const auto& a : pool) smax = std::max(smax, a.score);
      std::vector<double> w(pool.size());
      for (std::size_t i = 0; i < pool.size(); ++i) w[i] = std::exp((pool[i].score - smax) / cfg.sample_temperature);
      idx = rng.categorical(w);
    }
    chosen.push_back(pool[idx]);
    used.insert(pool[idx].action.position);
    std::erase_if(pool, [&](const ScoredAction& a) { return used.count(a.action.position) > 0; });
  }
  if (chosen.size() < k) {
    std::vector<ScoredAction> rest;
    for (const auto& [pos, row] : cands.per_position) {
      if (!used.count(pos) && !row.empty()) rest.push_back(row.front());
    }
    std::sort(rest.begin(), rest.end(), ranks_before);
    for (std::size_t i = 0; i < rest.size() && chosen.size() < k; ++i) chosen.push_back(rest[i]);
  }
  return chosen;
}

}  // namespace

void AugmenterConfig::validate() const {
  if (strategy != "identity" && strategy != "template" && strategy != "self-generate") {
    throw Error(ErrorKind::InvalidConfig, "unknown augmenter strategy '" + strategy + "'");
  }
  if (strategy != "identity" && template_tokens.empty() && (subtasks < 1 || slot_width < 1)) {
    throw Error(ErrorKind::InvalidConfig, "template needs subtasks >= 1 and slot_width >= 1");
  }
  if (strategy == "self-generate" && aux_length < 1) throw Error(ErrorKind::InvalidConfig, "aux_length must be >= 1");
}

void DecodeConfig::validate() const {
  if (length < 1) throw Error(ErrorKind::InvalidConfig, "length must be >= 1");
  search.validate(length);
  if (!(sample_temperature > 0)) throw Error(ErrorKind::InvalidConfig, "sample_temperature must be > 0");
  if (tokens_per_step < 1) throw Error(ErrorKind::InvalidConfig, "tokens_per_step must be >= 1");
  if (total_steps != 0 && total_steps < ceil_div(length - search.init_length, tokens_per_step)) {
    throw Error(ErrorKind::InvalidConfig, "total_steps cannot cover the remaining masks");
  }
  augmenter.validate();
}

nlohmann::json to_json(const DecodeConfig& c) {
  return {{"search", to_json(c.search)},
          {"length", c.length},
          {"total_steps", c.total_steps},
          {"sample_temperature", c.sample_temperature},
          {"remaining_mode", mode_name(c.remaining_mode)},
          {"tokens_per_step", c.tokens_per_step},
          {"augmenter",
           {{"strategy", c.augmenter.strategy},
            {"subtasks", c.augmenter.subtasks},
            {"slot_width", c.augmenter.slot_width},
            {"aux_length", c.augmenter.aux_length},
            {"template_tokens", c.augmenter.template_tokens}}}};
}

DecodeConfig decode_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"search", "length", "total_steps", "sample_temperature", "remaining_mode", "tokens_per_step", "augmenter"},
             "decode config");
  DecodeConfig c;
  try {
    if (j.contains("search")) c.search = search_config_from_json(j.at("search"));
    c.length = j.value("length", c.length);
    c.total_steps = j.value("total_steps", c.total_steps);
    c.sample_temperature = j.value("sample_temperature", c.sample_temperature);
    if (j.contains("remaining_mode")) c.remaining_mode = mode_from_name(j.at("remaining_mode").get<std::string>());
    c.tokens_per_step = j.value("tokens_per_step", c.tokens_per_step);
    if (j.contains("augmenter")) {
      const auto& a = j.at("augmenter");
      check_keys(a, {"strategy", "subtasks", "slot_width", "aux_length", "template_tokens"}, "augmenter");
      c.augmenter.strategy = a.value("strategy", c.augmenter.strategy);
      c.augmenter.subtasks = a.value("subtasks", c.augmenter.subtasks);
      c.augmenter.slot_width = a.value("slot_width", c.augmenter.slot_width);
      c.augmenter.aux_length = a.value("aux_length", c.augmenter.aux_length);
      c.augmenter.template_tokens = a.value("template_tokens", c.augmenter.template_tokens);
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("decode config: ") + e.what());
  }
  c.validate();
  return c;
}

DecodeConfig load_decode_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, path + ": " + e.what());
  }
  return decode_config_from_json(j);
}

nlohmann::json to_json(const DecodeResult& r) {
  nlohmann::json order = nlohmann::json::array();
  for (const auto& a : r.reveal_order) order.push_back(to_json(a));
  nlohmann::json trace = nlohmann::json::array();
  for (const auto& st : r.per_step_scores) {
    nlohmann::json acts = nlohmann::json::array();
    for (const auto& a : st.actions) acts.push_back(to_json(a));
    trace.push_back({{"step", st.step}, {"actions", acts}});
  }
  nlohmann::json pool = nullptr;
  if (r.pool) {
    nlohmann::json cands = nlohmann::json::array();
    for (const auto& c : r.pool->collected) cands.push_back(to_json(c));
    pool = {{"candidates", cands},
            {"budget_exhausted", r.pool->budget_exhausted},
            {"simulations", r.pool->simulations},
            {"iterations", r.pool->iterations}};
  }
  return {{"final", to_json(r.final)},
          {"generation", r.final.generation()},
          {"prompt", r.prompt},
          {"chosen_candidate", r.chosen_candidate ? nlohmann::json(*r.chosen_candidate) : nlohmann::json(nullptr)},
          {"candidate_gain", r.candidate_gain},
          {"reveal_order", order},
          {"trace", trace},
          {"pool", pool},
          {"model_calls", r.model_calls}};
}

std::vector<Token> decomposition_template(const AugmenterConfig& cfg, const Vocab& vocab) {
  if (!cfg.template_tokens.empty()) {
    for (Token t : cfg.template_tokens) {
      if (!vocab.is_content(t)) throw Error(ErrorKind::InvalidConfig, "template token outside the vocabulary");
    }
    return cfg.template_tokens;
  }
  constexpr std::size_t kShots = 2;
  std::vector<Token> out;
  out.reserve(kShots * cfg.subtasks * cfg.slot_width);
  for (std::size_t shot = 0; shot < kShots; ++shot) {
    for (std::size_t k = 0; k < cfg.subtasks; ++k) {
      for (std::size_t w = 0; w < cfg.slot_width; ++w) {
        const std::size_t raw = (shot * cfg.subtasks + k) * cfg.slot_width + w;
        out.push_back(static_cast<Token>(raw % vocab.size));
      }
    }
  }
  return out;
}

std::vector<Token> augment_prompt(const std::vector<Token>& prompt, const AugmenterConfig& cfg, const Denoiser& model,
                                  const DecodeConfig& decode_cfg, Rng& rng) {
  if (prompt.empty()) throw Error(ErrorKind::InvalidArgument, "prompt must be non-empty");
  cfg.validate();
  if (cfg.strategy == "identity") return prompt;
  const std::vector<Token> tmpl = decomposition_template(cfg, model.vocab());
  if (cfg.strategy == "template") {
    std::vector<Token> out = tmpl;
    out.insert(out.end(), prompt.begin(), prompt.end());
    return out;
  }
  // self-generate: the model writes its own decomposition after the template.
  std::vector<Token> base = prompt;
  base.insert(base.end(), tmpl.begin(), tmpl.end());
  DecodeConfig aux_cfg = decode_cfg;
  aux_cfg.total_steps = 0;
  const DecodeResult aux = finish_decode(model, SeqState::fully_masked(base, cfg.aux_length, model.vocab()), aux_cfg, rng);
  const auto gen = aux.final.generation();
  base.insert(base.end(), gen.begin(), gen.end());
  return base;
}

std::size_t select_candidate(const CandidatePool& pool) {
  if (pool.collected.empty()) throw Error(ErrorKind::EmptyPool, "no candidates to select from");
  std::size_t best = 0;
  for (std::size_t i = 1; i < pool.collected.size(); ++i) {
    if (pool.collected[i].gain > pool.collected[best].gain) best = i;
  }
  return best;
}

DecodeResult finish_decode(const Denoiser& model, const SeqState& state, const DecodeConfig& cfg, Rng& rng) {
  const std::uint64_t calls0 = model.calls();
  const std::size_t k = cfg.tokens_per_step;
  if (k < 1) throw Error(ErrorKind::InvalidConfig, "tokens_per_step must be >= 1");
  if (!(cfg.sample_temperature > 0)) throw Error(ErrorKind::InvalidConfig, "sample_temperature must be > 0");
  const std::size_t needed = ceil_div(state.masked_count(), k);
  const std::size_t total = cfg.total_steps ? cfg.total_steps : needed;
  if (total < needed) throw Error(ErrorKind::InvalidConfig, "total_steps cannot cover the remaining masks");

  DecodeResult res;
  res.prompt = state.prompt();
  res.final = state;
  for (std::size_t t = total; t >= 1; --t) {
    if (res.final.complete()) break;
    const DenoiserOutput out = model.predict(res.final);
    const ActionCandidates cands =
        build_candidates(res.final, out, cfg.search.k1, cfg.search.k2, cfg.search.score);
    StepTrace st;
    st.step = t;
    st.actions = choose_step_actions(cands, k, cfg, rng);
    for (const auto& a : st.actions) {
      res.final = apply_action(res.final, a.action);
      res.reveal_order.push_back(a.action);
    }
    res.per_step_scores.push_back(std::move(st));
  }
  res.model_calls = model.calls() - calls0;
  return res;
}

DecodeResult decode(const Denoiser& model, const std::vector<Token>& prompt, const DecodeConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::uint64_t calls0 = model.calls();
  const std::vector<Token> augmented = augment_prompt(prompt, cfg.augmenter, model, cfg, rng);
  const SeqState root = SeqState::fully_masked(augmented, cfg.length, model.vocab());

  SeqState start = root;
  std::vector<UnmaskAction> prefix;
  std::optional<CandidatePool> pool;
  std::optional<std::size_t> chosen;
  double gain = 0;
  if (cfg.search.init_length > 0) {
    pool = run_cgmcts(model, root, cfg.search, rng);
    chosen = select_candidate(*pool);
    const Candidate& c = pool->collected[*chosen];
    start = c.state;
    prefix = c.actions;
    gain = c.gain;
  }

  DecodeResult res = finish_decode(model, start, cfg, rng);
  prefix.insert(prefix.end(), res.reveal_order.begin(), res.reveal_order.end());
  res.reveal_order = std::move(prefix);
  res.prompt = augmented;
  res.pool = std::move(pool);
  res.chosen_candidate = chosen;
  res.candidate_gain = gain;
  res.model_calls = model.calls() - calls0;
  return res;
}

DecodeResult decode_greedy_baseline(const Denoiser& model, const std::vector<Token>& prompt, const DecodeConfig& cfg,
                                    Rng& rng) {
  DecodeConfig base = cfg;
  base.search.init_length = 0;
  base.remaining_mode = RemainingMode::argmax;
  base.augmenter = AugmenterConfig{};
  base.total_steps = 0;
  base.validate();
  return finish_decode(model, SeqState::fully_masked(prompt, base.length, model.vocab()), base, rng);
}

SeqState replay(const std::vector<Token>& prompt, std::size_t length, const Vocab& vocab,
                const std::vector<UnmaskAction>& order) {
  SeqState s = SeqState::fully_masked(prompt, length, vocab);
  for (const auto& a : order) s = apply_action(s, a);
  return s;
}

}  // namespace medal
