#include "medal/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <ostream>
#include <set>

#include "medal/error.hpp"
#include "medal/reward.hpp"
#include "medal/theory.hpp"

namespace medal {

namespace {

double uniform_in(Rng& rng, double lo, double hi) { return lo + (hi - lo) * rng.uniform(); }

std::vector<double> joint_from(std::size_t length, std::size_t v,
                               const std::function<double(const std::vector<Token>&)>& weight) {
  std::size_t cells = 1;
  for (std::size_t i = 0; i < length; ++i) cells *= v;
  std::vector<double> probs(cells);
  std::vector<Token> x(length, 0);
  double total = 0;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::size_t rest = cell;
    for (std::size_t k = length; k-- > 0;) {
      x[k] = static_cast<Token>(rest % v);
      rest /= v;
    }
    probs[cell] = weight(x);
    total += probs[cell];
  }
  for (double& p : probs) p /= total;
  return probs;
}

void check_keys(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& what) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, what + " must be an object");
  for (const auto& [k, _] : j.items()) {
    if (!allowed.count(k)) throw Error(ErrorKind::InvalidConfig, "unknown key '" + k + "' in " + what);
  }
}

ModelSource model_source_from_json(const nlohmann::json& j) {
  check_keys(j, {"kind", "instances", "seed", "length", "vocab_size", "path", "order", "alpha"}, "model");
  ModelSource m;
  m.kind = j.value("kind", m.kind);
  m.instances = j.value("instances", m.instances);
  m.seed = j.value("seed", m.seed);
  m.length = j.value("length", m.length);
  m.vocab_size = j.value("vocab_size", m.vocab_size);
  m.path = j.value("path", m.path);
  m.order = j.value("order", m.order);
  m.alpha = j.value("alpha", m.alpha);
  return m;
}

nlohmann::json opt(const std::optional<double>& x) { return x ? nlohmann::json(*x) : nlohmann::json(nullptr); }

nlohmann::json to_json(const ModelSource& m) {
  return {{"kind", m.kind},   {"instances", m.instances}, {"seed", m.seed},   {"length", m.length},
          {"vocab_size", m.vocab_size}, {"path", m.path}, {"order", m.order}, {"alpha", m.alpha}};
}

std::optional<double> mean_of(const std::vector<double>& xs) {
  if (xs.empty()) return std::nullopt;
  double s = 0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

std::optional<double> std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return std::nullopt;
  const double m = *mean_of(xs);
  double s = 0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

// B and DepErr along the realised reveal trajectory, one step per decode step.
void trajectory_costs(const TabularModel& q, const DecodeResult& res, std::size_t init_steps, MetricsRow& row) {
  std::vector<std::vector<UnmaskAction>> steps;
  for (std::size_t i = 0; i < init_steps && i < res.reveal_order.size(); ++i) steps.push_back({res.reveal_order[i]});
  for (const auto& st : res.per_step_scores) {
    std::vector<UnmaskAction> acts;
    for (const auto& sa : st.actions) acts.push_back(sa.action);
    if (!acts.empty()) steps.push_back(std::move(acts));
  }
  SeqState state = SeqState::fully_masked(res.prompt, q.length(), q.vocab());
  double j = 0, dep = 0;
  for (const auto& acts : steps) {
    std::vector<std::size_t> block;
    for (const auto& a : acts) block.push_back(a.position);
    std::sort(block.begin(), block.end());
    j += entropy_gap(q, state, block);
    dep += dependence_error(q, state, block);
    for (const auto& a : acts) state = apply_action(state, a);
  }
  row.J = j;
  row.dep_err = dep;
}

}  // namespace

TabularModel adversarial_instance(std::uint64_t seed, std::size_t length, std::size_t vocab_size) {
  if (length < 2 || vocab_size < 3) {
    throw Error(ErrorKind::InvalidArgument, "adversarial instances need length >= 2 and vocab >= 3");
  }
  Rng rng(seed);
  const double others = static_cast<double>(vocab_size - 1);
  double m = 0;
  std::vector<Token> spike(length), decoy(length);
  std::vector<double> a(length);
  auto product = [&](const std::vector<Token>& x) {
    double p = 1;
    for (std::size_t i = 0; i < length; ++i) p *= x[i] == decoy[i] ? a[i] : (1 - a[i]) / others;
    return p;
  };
  std::size_t draws = 0;
  // Redraw until every decoy marginal beats its spike token and the spike is the joint mode.
  for (bool ok = false; !ok;) {
    if (++draws > 10000) throw Error(ErrorKind::InvalidArgument, "no adversarial instance at this size");
    m = uniform_in(rng, 0.26, 0.34);
    ok = true;
    double decoy_mode = 1 - m;
    for (std::size_t i = 0; i < length; ++i) {
      spike[i] = static_cast<Token>(rng.next() % vocab_size);
      decoy[i] = static_cast<Token>((spike[i] + 1 + rng.next() % (vocab_size - 1)) % vocab_size);
      a[i] = uniform_in(rng, 0.68, 0.78);
      decoy_mode *= a[i];
      ok = ok && (1 - m) * a[i] > m + (1 - m) * (1 - a[i]) / others;
    }
    ok = ok && m + (1 - m) * product(spike) > decoy_mode;
  }
  auto probs = joint_from(length, vocab_size, [&](const std::vector<Token>& x) {
    return (1 - m) * product(x) + (x == spike ? m : 0.0);
  });
  return TabularModel(vocab_size, length, std::move(probs));
}

std::vector<TabularModel> adversarial_family(std::size_t count, std::uint64_t seed, std::size_t length,
                                             std::size_t vocab_size) {
  std::vector<TabularModel> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(adversarial_instance(seed * 1000003ULL + i, length, vocab_size));
  return out;
}

TabularModel random_tabular(std::uint64_t seed, std::size_t length, std::size_t vocab_size) {
  if (length < 1 || vocab_size < 2) throw Error(ErrorKind::InvalidArgument, "need length >= 1 and vocab >= 2");
  Rng rng(seed);
  std::vector<std::vector<double>> unary(length, std::vector<double>(vocab_size));
  for (auto& u : unary)
    for (double& x : u) x = uniform_in(rng, 0.1, 1.0);
  // Pairwise couplings between every pair of positions.
  std::vector<std::vector<double>> pair(length * length, std::vector<double>(vocab_size * vocab_size, 0.0));
  for (std::size_t i = 0; i < length; ++i)
    for (std::size_t k = i + 1; k < length; ++k)
      for (double& w : pair[i * length + k]) w = uniform_in(rng, -1.5, 1.5);
  const double mix = uniform_in(rng, 0.2, 0.8);
  auto probs = joint_from(length, vocab_size, [&](const std::vector<Token>& x) {
    double prod = 1, energy = 0;
    for (std::size_t i = 0; i < length; ++i) {
      prod *= unary[i][x[i]];
      for (std::size_t k = i + 1; k < length; ++k) energy += pair[i * length + k][x[i] * vocab_size + x[k]];
    }
    return mix * prod + (1 - mix) * prod * std::exp(energy);
  });
  return TabularModel(vocab_size, length, std::move(probs));
}

TabularModel xor_model(std::size_t length) {
  if (length < 2) throw Error(ErrorKind::InvalidArgument, "xor model needs length >= 2");
  auto probs = joint_from(length, 2, [](const std::vector<Token>& x) {
    return std::all_of(x.begin(), x.end(), [&](Token t) { return t == x[0]; }) ? 1.0 : 0.0;
  });
  return TabularModel(2, length, std::move(probs));
}

void ExperimentSpec::validate() const {
  if (seeds.empty()) throw Error(ErrorKind::InvalidConfig, "seeds must be non-empty");
  if (methods.empty()) throw Error(ErrorKind::InvalidConfig, "methods must be non-empty");
  if (model.kind != "adversarial" && model.kind != "tabular" && model.kind != "ngram") {
    throw Error(ErrorKind::InvalidConfig, "unknown model kind '" + model.kind + "'");
  }
  if (model.kind == "adversarial" && model.instances == 0) {
    throw Error(ErrorKind::InvalidConfig, "instances must be >= 1");
  }
  if (model.kind != "adversarial" && model.path.empty()) throw Error(ErrorKind::InvalidConfig, "model path required");
  std::set<std::string> ids;
  for (const auto& m : methods) {
    if (m.id.empty() || !ids.insert(m.id).second) throw Error(ErrorKind::InvalidConfig, "method ids must be unique");
    if (m.type != "medal" && m.type != "greedy" && m.type != "best_of_n") {
      throw Error(ErrorKind::InvalidConfig, "unknown method type '" + m.type + "'");
    }
    if (m.type == "best_of_n" && m.n == 0) throw Error(ErrorKind::InvalidConfig, "best_of_n needs n >= 1");
    m.config.validate();
  }
}

ExperimentSpec experiment_spec_from_json(const nlohmann::json& j) {
  check_keys(j, {"model", "methods", "seeds", "prompt", "timing"}, "experiment");
  ExperimentSpec spec;
  if (j.contains("model")) spec.model = model_source_from_json(j.at("model"));
  if (j.contains("methods")) {
    spec.methods.clear();
    for (const auto& mj : j.at("methods")) {
      check_keys(mj, {"id", "type", "n", "config"}, "method");
      MethodSpec m;
      m.id = mj.value("id", std::string{});
      m.type = mj.value("type", m.type);
      m.n = mj.value("n", m.n);
      if (mj.contains("config")) m.config = decode_config_from_json(mj.at("config"));
      spec.methods.push_back(std::move(m));
    }
  }
  if (j.contains("seeds")) spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  if (j.contains("prompt")) spec.prompt = j.at("prompt").get<std::vector<Token>>();
  spec.timing = j.value("timing", spec.timing);
  return spec;
}

nlohmann::json to_json(const ExperimentSpec& spec) {
  nlohmann::json methods = nlohmann::json::array();
  for (const auto& m : spec.methods) {
    methods.push_back({{"id", m.id}, {"type", m.type}, {"n", m.n}, {"config", to_json(m.config)}});
  }
  return {{"model", to_json(spec.model)}, {"methods", methods}, {"seeds", spec.seeds},
          {"prompt", spec.prompt},        {"timing", spec.timing}};
}

std::vector<std::shared_ptr<const Denoiser>> load_models(const ModelSource& src) {
  std::vector<std::shared_ptr<const Denoiser>> out;
  if (src.kind == "adversarial") {
    for (auto& m : adversarial_family(src.instances, src.seed, src.length, src.vocab_size)) {
      out.push_back(std::make_shared<TabularModel>(std::move(m)));
    }
  } else if (src.kind == "tabular") {
    out.push_back(std::make_shared<TabularModel>(TabularModel::load(src.path)));
  } else if (src.kind == "ngram") {
    out.push_back(std::make_shared<NGramMaskedModel>(fit_ngram(read_corpus(src.path), src.order, src.alpha,
                                                               src.vocab_size)));
  } else {
    throw Error(ErrorKind::InvalidConfig, "unknown model kind '" + src.kind + "'");
  }
  return out;
}

nlohmann::json to_json(const MetricsRow& r) {
  nlohmann::json j = {{"method", r.method},
                      {"seed", r.seed},
                      {"instance", r.instance},
                      {"error", r.error ? nlohmann::json(*r.error) : nlohmann::json(nullptr)},
                      {"generation", r.generation},
                      {"joint_log_prob", opt(r.joint_log_prob)},
                      {"cumulative_gain", opt(r.cumulative_gain)},
                      {"model_calls", r.model_calls},
                      {"J", opt(r.J)},
                      {"dep_err", opt(r.dep_err)}};
  if (r.wall_ms) j["wall_ms"] = *r.wall_ms;
  return j;
}

MetricsRow run_row(const MethodSpec& method, const Denoiser& model, const std::vector<Token>& prompt,
                   std::uint64_t seed, std::size_t instance, bool timing) {
  MetricsRow row;
  row.method = method.id;
  row.seed = seed;
  row.instance = instance;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const std::uint64_t calls0 = model.calls();
    DecodeResult res;
    std::size_t init_steps = 0;
    if (method.type == "medal") {
      Rng rng(seed);
      res = decode(model, prompt, method.config, rng);
      row.cumulative_gain = res.candidate_gain;
      init_steps = res.chosen_candidate ? method.config.search.init_length : 0;
    } else if (method.type == "greedy") {
      Rng rng(seed);
      res = decode_greedy_baseline(model, prompt, method.config, rng);
      row.cumulative_gain = 0.0;
    } else if (method.type == "best_of_n") {
      DecodeConfig cfg = method.config;
      cfg.remaining_mode = RemainingMode::sample;
      const SeqState root = SeqState::fully_masked(prompt, cfg.length, model.vocab());
      std::vector<DecodeResult> runs;
      std::map<std::vector<Token>, std::size_t> votes;
      for (std::size_t i = 0; i < method.n; ++i) {
        Rng sub(seed * method.n + i);
        runs.push_back(finish_decode(model, root, cfg, sub));
        ++votes[runs.back().final.generation()];
      }
      std::size_t best = 0, best_votes = 0;
      for (std::size_t i = 0; i < runs.size(); ++i) {
        const std::size_t v = votes[runs[i].final.generation()];
        if (v > best_votes) {
          best_votes = v;
          best = i;
        }
      }
      res = std::move(runs[best]);
    } else {
      throw Error(ErrorKind::InvalidConfig, "unknown method type '" + method.type + "'");
    }
    row.model_calls = model.calls() - calls0;
    row.generation = res.final.generation();
    if (const auto* q = dynamic_cast<const TabularModel*>(&model)) {
      if (row.generation.size() == q->length()) {
        row.joint_log_prob = std::log(q->prob(row.generation));
        if (method.type != "best_of_n") trajectory_costs(*q, res, init_steps, row);
      }
    }
  } catch (const std::exception& e) {
    row.error = e.what();
  }
  if (timing) {
    row.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  }
  return row;
}

std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows) {
  std::vector<MethodSummary> out;
  std::map<std::string, std::size_t> index;
  std::vector<std::vector<double>> lp, gain, calls;
  for (const auto& r : rows) {
    auto [it, fresh] = index.emplace(r.method, out.size());
    if (fresh) {
      out.push_back({});
      out.back().method = r.method;
      lp.emplace_back();
      gain.emplace_back();
      calls.emplace_back();
    }
    auto& s = out[it->second];
    ++s.rows;
    if (r.error) {
      ++s.errors;
      continue;
    }
    if (r.joint_log_prob) lp[it->second].push_back(*r.joint_log_prob);
    if (r.cumulative_gain) gain[it->second].push_back(*r.cumulative_gain);
    calls[it->second].push_back(static_cast<double>(r.model_calls));
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].mean_joint_log_prob = mean_of(lp[i]);
    out[i].std_joint_log_prob = std_of(lp[i]);
    out[i].mean_cumulative_gain = mean_of(gain[i]);
    out[i].std_cumulative_gain = std_of(gain[i]);
    out[i].mean_model_calls = mean_of(calls[i]).value_or(0.0);
  }
  return out;
}

ExperimentResult run_experiment(const ExperimentSpec& spec) {
  spec.validate();
  const auto models = load_models(spec.model);
  ExperimentResult result;
  for (const auto& method : spec.methods) {
    for (std::size_t inst = 0; inst < models.size(); ++inst) {
      for (std::uint64_t seed : spec.seeds) {
        result.rows.push_back(run_row(method, *models[inst], spec.prompt, seed, inst, spec.timing));
      }
    }
  }
  result.summary = summarize(result.rows);
  return result;
}

namespace {

const MethodSpec& base_medal(const ExperimentSpec& spec) {
  for (const auto& m : spec.methods) {
    if (m.type == "medal") return m;
  }
  throw Error(ErrorKind::InvalidConfig, "spec needs a medal method");
}

}  // namespace

ExperimentResult ablation_matrix(const ExperimentSpec& spec) {
  spec.validate();
  const MethodSpec& base = base_medal(spec);
  ExperimentSpec run = spec;
  run.methods.clear();
  auto add = [&](const std::string& id, auto&& tweak) {
    MethodSpec m = base;
    m.id = id;
    m.type = "medal";
    if (m.config.augmenter.strategy == "identity") m.config.augmenter.strategy = "template";
    tweak(m.config);
    run.methods.push_back(std::move(m));
  };
  add("full", [](DecodeConfig&) {});
  add("no-mcts", [](DecodeConfig& c) { c.search.init_length = 0; });
  add("no-augmenter", [](DecodeConfig& c) { c.augmenter.strategy = "identity"; });
  add("margin-only", [](DecodeConfig& c) { c.search.score.entropy_penalty = false; });
  return run_experiment(run);
}

ExperimentResult scaling_sweep(const ExperimentSpec& spec, const std::vector<std::size_t>& lc_values) {
  spec.validate();
  if (lc_values.empty()) throw Error(ErrorKind::InvalidConfig, "need at least one L_c value");
  const MethodSpec& base = base_medal(spec);
  ExperimentSpec run = spec;
  run.methods.clear();
  for (std::size_t lc : lc_values) {
    MethodSpec m = base;
    m.id = "medal-lc" + std::to_string(lc);
    m.config.search.init_length = lc;
    run.methods.push_back(std::move(m));
  }
  ExperimentResult result = run_experiment(run);
  nlohmann::json sweep = nlohmann::json::array();
  for (std::size_t i = 0; i < lc_values.size(); ++i) {
    const auto it = std::find_if(result.summary.begin(), result.summary.end(),
                                 [&](const MethodSummary& s) { return s.method == run.methods[i].id; });
    sweep.push_back({{"init_length", lc_values[i]},
                     {"mean_cumulative_gain", opt(it->mean_cumulative_gain)},
                     {"std_cumulative_gain", opt(it->std_cumulative_gain)},
                     {"mean_joint_log_prob", opt(it->mean_joint_log_prob)},
                     {"mean_model_calls", it->mean_model_calls}});
  }
  result.extra["sweep"] = sweep;
  return result;
}

void write_jsonl(std::ostream& out, const ExperimentResult& result) {
  for (const auto& r : result.rows) out << to_json(r).dump() << '\n';
  nlohmann::json summary = nlohmann::json::array();
  for (const auto& s : result.summary) {
    summary.push_back({{"method", s.method},
                       {"rows", s.rows},
                       {"errors", s.errors},
                       {"mean_joint_log_prob", opt(s.mean_joint_log_prob)},
                       {"std_joint_log_prob", opt(s.std_joint_log_prob)},
                       {"mean_cumulative_gain", opt(s.mean_cumulative_gain)},
                       {"std_cumulative_gain", opt(s.std_cumulative_gain)},
                       {"mean_model_calls", s.mean_model_calls}});
  }
  nlohmann::json tail = {{"summary", summary}};
  if (!result.extra.is_null()) tail["extra"] = result.extra;
  out << tail.dump() << '\n';
}

}  // namespace medal
