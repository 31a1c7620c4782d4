#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "medal/decoder.hpp"
#include "medal/error.hpp"
#include "medal/harness.hpp"
#include "medal/mcts.hpp"
#include "medal/remote.hpp"
#include "medal/theory.hpp"

namespace {

using namespace medal;

struct ModelFlags {
  std::string spec;
  std::size_t vocab_size = 0;
  std::size_t order = 3;
  double alpha = 0.1;
};

std::unique_ptr<Denoiser> make_model(const ModelFlags& f) {
  if (f.spec.rfind("ngram:", 0) == 0) {
    return std::make_unique<NGramMaskedModel>(fit_ngram(read_corpus(f.spec.substr(6)), f.order, f.alpha, f.vocab_size));
  }
  if (f.spec.rfind("remote:", 0) == 0) {
    if (f.vocab_size < 2) throw Error(ErrorKind::InvalidArgument, "remote models need --vocab-size");
    return std::make_unique<RemoteDenoiser>(Vocab(f.vocab_size), f.spec.substr(7));
  }
  return std::make_unique<TabularModel>(TabularModel::load(f.spec));
}

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::stringstream is(item);
    T v{};
    if (!(is >> v) || !is.eof()) throw Error(ErrorKind::InvalidArgument, "bad list item '" + item + "'");
    out.push_back(v);
  }
  return out;
}

nlohmann::json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::Io, "cannot open " + path);
  return nlohmann::json::parse(in);
}

// Writes to --out when given, stdout otherwise.
class Output {
 public:
  explicit Output(const std::string& path) {
    if (!path.empty()) {
      file_.open(path);
      if (!file_) throw Error(ErrorKind::Io, "cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("medal");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::warn);
  if (const char* lvl = std::getenv("MEDAL_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(lvl));
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Search-guided decoding for masked denoisers"};
  app.require_subcommand(1);

  ModelFlags model_flags;
  std::string prompt_text = "0";
  std::string config_path;
  std::string out_path;
  std::uint64_t seed = 1;
  bool seed_set = false;
  bool trace = false;

  auto add_model = [&](CLI::App* sub) {
    sub->add_option("--model", model_flags.spec, "tabular .json, ngram:<corpus> or remote:host:port")->required();
    sub->add_option("--vocab-size", model_flags.vocab_size, "vocabulary size (0 infers for ngram)");
    sub->add_option("--ngram-order", model_flags.order, "n-gram order");
    sub->add_option("--alpha", model_flags.alpha, "n-gram additive smoothing");
    sub->add_option("--prompt", prompt_text, "comma-separated prompt tokens");
  };
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "configuration JSON");
    sub->add_option("--out", out_path, "output JSONL path (stdout if omitted)");
    sub->add_option_function<std::uint64_t>(
        "--seed", [&](std::uint64_t s) { seed = s; seed_set = true; }, "random seed");
  };

  auto* decode_cmd = app.add_subcommand("decode", "decode one sequence");
  add_model(decode_cmd);
  add_common(decode_cmd);
  decode_cmd->add_flag("--trace", trace, "emit per-step scores and search trace");

  auto* init_cmd = app.add_subcommand("mcts-init", "run only the search initialisation and print the pool");
  add_model(init_cmd);
  add_common(init_cmd);
  init_cmd->add_flag("--trace", trace, "emit one line per search iteration");

  std::string theory_mode = "lemma1";
  std::size_t theory_k = 2, theory_step = 0, theory_len = 3, theory_instances = 20;
  std::string budgets_text = "4,16,64";
  std::string theory_model;
  auto* theory_cmd = app.add_subcommand("theory-check", "check the entropy-gap bound or schedule search on random instances");
  add_common(theory_cmd);
  theory_cmd->add_option("--mode", theory_mode, "lemma1 | theorem1")->check(CLI::IsMember({"lemma1", "theorem1"}));
  theory_cmd->add_option("--k", theory_k, "schedule steps");
  theory_cmd->add_option("--step-size", theory_step, "tokens per step (0 = any, covering)");
  theory_cmd->add_option("--length", theory_len, "instance length");
  theory_cmd->add_option("--vocab-size", model_flags.vocab_size, "instance vocabulary (default 3)");
  theory_cmd->add_option("--seeds", theory_instances, "number of seeded instances");
  theory_cmd->add_option("--budgets", budgets_text, "comma-separated simulation budgets");
  theory_cmd->add_option("--model", theory_model, "tabular .json to check instead of random instances");

  auto* bench_cmd = app.add_subcommand("bench", "run an experiment spec");
  add_common(bench_cmd);
  auto* ablate_cmd = app.add_subcommand("ablate", "run the ablation variants of an experiment spec");
  add_common(ablate_cmd);
  std::string lc_text = "0,1,2,3,4";
  auto* sweep_cmd = app.add_subcommand("sweep", "run MEDAL across initialisation lengths");
  add_common(sweep_cmd);
  sweep_cmd->add_option("--lc", lc_text, "comma-separated L_c values");
  for (auto* sub : {bench_cmd, ablate_cmd, sweep_cmd}) sub->get_option("--config")->required();

  auto* serve_cmd = app.add_subcommand("serve", "answer line-delimited denoiser requests on stdin/stdout");
  add_model(serve_cmd);

  CLI11_PARSE(app, argc, argv);

  try {
    if (decode_cmd->parsed() || init_cmd->parsed()) {
      const auto model = make_model(model_flags);
      DecodeConfig cfg = config_path.empty() ? DecodeConfig{} : load_decode_config(config_path);
      if (seed_set) cfg.search.seed = seed;
      cfg.validate();
      const auto prompt = parse_list<Token>(prompt_text);
      Output out(out_path);
      Rng rng(cfg.search.seed);
      spdlog::info("decoding L={} L_c={} seed={}", cfg.length, cfg.search.init_length, cfg.search.seed);
      if (decode_cmd->parsed()) {
        const DecodeResult res = decode(*model, prompt, cfg, rng);
        nlohmann::json j = to_json(res);
        if (!trace) j.erase("trace");
        out.stream() << j.dump() << '\n';
        if (trace && res.pool) {
          for (const auto& line : res.pool->trace) out.stream() << line.dump() << '\n';
        }
      } else {
        if (cfg.search.init_length == 0) throw Error(ErrorKind::InvalidConfig, "mcts-init needs init_length >= 1");
        const auto augmented = augment_prompt(prompt, cfg.augmenter, *model, cfg, rng);
        const SeqState root = SeqState::fully_masked(augmented, cfg.length, model->vocab());
        const CandidatePool pool = run_cgmcts(*model, root, cfg.search, rng, {});
        for (const auto& c : pool.collected) out.stream() << to_json(c).dump() << '\n';
        if (trace) {
          for (const auto& line : pool.trace) out.stream() << line.dump() << '\n';
        }
        out.stream() << nlohmann::json{{"summary",
                                        {{"candidates", pool.collected.size()},
                                         {"budget_exhausted", pool.budget_exhausted},
                                         {"simulations", pool.simulations},
                                         {"iterations", pool.iterations},
                                         {"model_calls", model->calls()}}}}
                            .dump()
                     << '\n';
      }
    } else if (theory_cmd->parsed()) {
      const std::size_t v = model_flags.vocab_size ? model_flags.vocab_size : 3;
      const auto budgets = parse_list<std::size_t>(budgets_text);
      Output out(out_path);
      std::optional<TabularModel> fixed;
      if (!theory_model.empty()) {
        fixed = TabularModel::load(theory_model);
        theory_instances = 1;
      }
      std::size_t passed = 0;
      for (std::size_t i = 0; i < theory_instances; ++i) {
        const std::uint64_t inst_seed = seed * 7919 + i;
        const TabularModel q = fixed ? *fixed : random_tabular(inst_seed, theory_len, v);
        const SeqState root = SeqState::fully_masked({}, q.length(), q.vocab());
        nlohmann::json line;
        bool ok = false;
        if (theory_mode == "lemma1") {
          const auto rep = verify_lemma1(q, root, enumerate_all_schedules(root));
          ok = rep.min_slack >= -1e-9;
          line = to_json(rep);
          line["instance"] = i;
          line["schedules"] = rep.rows.size();
        } else {
          const auto rep = verify_theorem1(q, root, {theory_k, theory_step}, budgets, inst_seed);
          ok = rep.non_increasing && rep.final_ratio() <= 1.05;
          line = to_json(rep);
          line["instance"] = i;
        }
        passed += ok;
        line["ok"] = ok;
        out.stream() << line.dump() << '\n';
      }
      out.stream() << nlohmann::json{{"summary", {{"mode", theory_mode}, {"instances", theory_instances},
                                                  {"passed", passed}}}}
                          .dump()
                   << '\n';
    } else if (bench_cmd->parsed() || ablate_cmd->parsed() || sweep_cmd->parsed()) {
      ExperimentSpec spec = experiment_spec_from_json(read_json(config_path));
      if (seed_set) spec.seeds = {seed};
      ExperimentResult result;
      if (bench_cmd->parsed()) {
        result = run_experiment(spec);
      } else if (ablate_cmd->parsed()) {
        result = ablation_matrix(spec);
      } else {
        result = scaling_sweep(spec, parse_list<std::size_t>(lc_text));
      }
      Output out(out_path);
      write_jsonl(out.stream(), result);
      for (const auto& s : result.summary) {
        spdlog::info("{}: rows={} errors={} mean_log_prob={}", s.method, s.rows, s.errors,
                     s.mean_joint_log_prob ? std::to_string(*s.mean_joint_log_prob) : "n/a");
      }
    } else if (serve_cmd->parsed()) {
      const auto model = make_model(model_flags);
      const std::size_t n = serve_denoiser(*model, std::cin, std::cout);
      spdlog::info("served {} requests", n);
    }
  } catch (const Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
