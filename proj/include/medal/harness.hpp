#pragma once

#include <cstdint>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "medal/decoder.hpp"
#include "medal/denoiser.hpp"
#include "medal/random.hpp"

namespace medal {

// ---- instance generators -------------------------------------------------

/// Joint with a single high-mass "spike" sequence hidden under a diffuse
/// product of per-position decoys. Each decoy token has the larger marginal,
/// so greedy unmasking locks onto the product component, while the spike
/// carries the joint mode.
TabularModel adversarial_instance(std::uint64_t seed, std::size_t length = 4, std::size_t vocab_size = 3);
std::vector<TabularModel> adversarial_family(std::size_t count, std::uint64_t seed,
                                             std::size_t length = 4, std::size_t vocab_size = 3);

/// Strictly positive random joint mixing a product component with random
/// pairwise-coupled mass.
TabularModel random_tabular(std::uint64_t seed, std::size_t length, std::size_t vocab_size);

/// Uniform over {(v, v, ..., v)} restricted to tokens 0 and 1.
TabularModel xor_model(std::size_t length = 2);

// ---- experiments ---------------------------------------------------------

struct MethodSpec {
  std::string id;
  std::string type = "medal";  // medal | greedy | best_of_n
  std::size_t n = 5;           // best_of_n only
  DecodeConfig config;
};

struct ModelSource {
  std::string kind = "adversarial";  // adversarial | tabular | ngram
  std::size_t instances = 1;         // adversarial
  std::uint64_t seed = 1;            // adversarial
  std::size_t length = 4;            // adversarial
  std::size_t vocab_size = 3;        // adversarial / ngram (0 infers)
  std::string path;                  // tabular file or ngram corpus
  std::size_t order = 2;             // ngram
  double alpha = 0.1;                // ngram
};

struct ExperimentSpec {
  ModelSource model;
  std::vector<MethodSpec> methods;
  std::vector<std::uint64_t> seeds{1};
  std::vector<Token> prompt{0};
  bool timing = false;  // wall_ms in rows breaks byte-identical reruns

  void validate() const;
};

ExperimentSpec experiment_spec_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentSpec& spec);

/// Models an experiment runs over, in instance order.
std::vector<std::shared_ptr<const Denoiser>> load_models(const ModelSource& src);

struct MetricsRow {
  std::string method;
  std::uint64_t seed = 0;
  std::size_t instance = 0;
  std::optional<std::string> error;
  std::vector<Token> generation;
  std::optional<double> joint_log_prob;
  std::optional<double> cumulative_gain;
  std::uint64_t model_calls = 0;
  std::optional<double> J;
  std::optional<double> dep_err;
  std::optional<double> wall_ms;
};

nlohmann::json to_json(const MetricsRow& r);

struct MethodSummary {
  std::string method;
  std::size_t rows = 0;
  std::size_t errors = 0;
  // Empty when no row carries the metric; std needs two values.
  std::optional<double> mean_joint_log_prob;
  std::optional<double> std_joint_log_prob;
  std::optional<double> mean_cumulative_gain;
  std::optional<double> std_cumulative_gain;
  double mean_model_calls = 0;
};

struct ExperimentResult {
  std::vector<MetricsRow> rows;
  std::vector<MethodSummary> summary;
  nlohmann::json extra;  // sweep tables and the like
};

/// Runs one method on one instance and seed.
MetricsRow run_row(const MethodSpec& method, const Denoiser& model, const std::vector<Token>& prompt,
                   std::uint64_t seed, std::size_t instance, bool timing = false);

ExperimentResult run_experiment(const ExperimentSpec& spec);

/// Variants: full, no-mcts (L_c = 0), no-augmenter, margin-only (no entropy
/// penalty). The base configuration is the spec's first medal method.
ExperimentResult ablation_matrix(const ExperimentSpec& spec);

/// MEDAL at each L_c, plus per-L_c means in `extra["sweep"]`.
ExperimentResult scaling_sweep(const ExperimentSpec& spec, const std::vector<std::size_t>& lc_values);

std::vector<MethodSummary> summarize(const std::vector<MetricsRow>& rows);

/// Rows, then one summary line.
void write_jsonl(std::ostream& out, const ExperimentResult& result);

}  // namespace medal
