#include "medal/mcts.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <set>
#include <unordered_set>

#include "medal/error.hpp"

namespace medal {

namespace {

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* what) {
  if (!j.is_object()) throw Error(ErrorKind::InvalidConfig, std::string(what) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* k) { return key == k; })) {
      throw Error(ErrorKind::InvalidConfig, std::string("unknown ") + what + " field '" + key + "'");
    }
  }
}

std::string rollout_name(RolloutMode m) { return m == RolloutMode::argmax ? "argmax" : "sample"; }

RolloutMode rollout_from_name(const std::string& s) {
  if (s == "sample") return RolloutMode::sample;
  if (s == "argmax") return RolloutMode::argmax;
  throw Error(ErrorKind::InvalidConfig, "unknown rollout mode '" + s + "'");
}

std::size_t argmax_index(const std::vector<double>& xs) {
  return static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
}

// Rollout continuing from a prediction already made at `state`.
SeqState rollout_from(const Denoiser& model, SeqState state, std::optional<DenoiserOutput> first, Rng& rng,
                      const SearchConfig& cfg) {
  while (!state.complete()) {
    const DenoiserOutput out = first ? std::move(*first) : model.predict(state);
    first.reset();
    std::vector<PositionScore> scores;
    scores.reserve(out.logits.size());
    for (const auto& [pos, logits] : out.logits) scores.push_back(score_position(logits, cfg.score, pos));
    // (best score, index) pairs; most confident first, position order breaks ties.
    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(scores.size());
    for (std::size_t i = 0; i < scores.size(); ++i) order.emplace_back(scores[i].scores[scores[i].best_token()], i);
    const std::size_t take = std::min(cfg.rollout_tokens_per_call, scores.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [](const auto& a, const auto& b) { return a.first > b.first || (a.first == b.first && a.second < b.second); });
    for (std::size_t k = 0; k < take; ++k) {
      const auto& ps = scores[order[k].second];
      const std::size_t tok = cfg.rollout == RolloutMode::argmax ? argmax_index(ps.probs) : rng.categorical(ps.probs);
      state = apply_action(state, {ps.position, static_cast<Token>(tok)});
    }
  }
  return state;
}

struct Job {
  SearchNode* child;
  std::uint64_t seed;
};

}  // namespace

void SearchConfig::validate(std::size_t gen_len) const {
  auto fail = [](const std::string& m) { throw Error(ErrorKind::InvalidConfig, m); };
  if (k1 < 1 || k2 < 1) fail("k1 and k2 must be >= 1");
  if (!(score.gamma > 0)) fail("gamma must be > 0");
  if (!(score.epsilon > 0)) fail("epsilon must be > 0");
  if (!(c_explore >= 0)) fail("c_explore must be >= 0");
  if (candidate_count < 1) fail("candidate_count must be >= 1");
  if (simulation_budget() < candidate_count) fail("max_simulations must be >= candidate_count");
  if (rollout_tokens_per_call < 1) fail("rollout_tokens_per_call must be >= 1");
  if (gen_len > 0 && init_length >= gen_len) fail("init_length must be < length");
}

nlohmann::json to_json(const SearchConfig& c) {
  return {{"k1", c.k1},
          {"k2", c.k2},
          {"gamma", c.score.gamma},
          {"epsilon", c.score.epsilon},
          {"entropy_penalty", c.score.entropy_penalty},
          {"margin_factor", c.score.margin_factor},
          {"c_explore", c.c_explore},
          {"candidate_count", c.candidate_count},
          {"init_length", c.init_length},
          {"max_simulations", c.simulation_budget()},
          {"seed", c.seed},
          {"rollout", rollout_name(c.rollout)},
          {"rollout_tokens_per_call", c.rollout_tokens_per_call},
          {"fill_on_exhaustion", c.fill_on_exhaustion},
          {"parallel_rollouts", c.parallel_rollouts},
          {"record_trace", c.record_trace}};
}

SearchConfig search_config_from_json(const nlohmann::json& j) {
  check_keys(j,
             {"k1", "k2", "gamma", "epsilon", "entropy_penalty", "margin_factor", "c_explore", "candidate_count",
              "init_length", "max_simulations", "seed", "rollout", "rollout_tokens_per_call", "fill_on_exhaustion",
              "parallel_rollouts", "record_trace"},
             "search config");
  SearchConfig c;
  try {
    c.k1 = j.value("k1", c.k1);
    c.k2 = j.value("k2", c.k2);
    c.score.gamma = j.value("gamma", c.score.gamma);
    c.score.epsilon = j.value("epsilon", c.score.epsilon);
    c.score.entropy_penalty = j.value("entropy_penalty", c.score.entropy_penalty);
    c.score.margin_factor = j.value("margin_factor", c.score.margin_factor);
    c.c_explore = j.value("c_explore", c.c_explore);
    c.candidate_count = j.value("candidate_count", c.candidate_count);
    c.init_length = j.value("init_length", c.init_length);
    c.max_simulations = j.value("max_simulations", c.max_simulations);
    c.seed = j.value("seed", c.seed);
    if (j.contains("rollout")) c.rollout = rollout_from_name(j.at("rollout").get<std::string>());
    c.rollout_tokens_per_call = j.value("rollout_tokens_per_call", c.rollout_tokens_per_call);
    c.fill_on_exhaustion = j.value("fill_on_exhaustion", c.fill_on_exhaustion);
    c.parallel_rollouts = j.value("parallel_rollouts", c.parallel_rollouts);
    c.record_trace = j.value("record_trace", c.record_trace);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::InvalidConfig, std::string("search config: ") + e.what());
  }
  c.validate();
  return c;
}

nlohmann::json to_json(const Candidate& c) {
  nlohmann::json actions = nlohmann::json::array();
  for (const auto& a : c.actions) actions.push_back(to_json(a));
  return {{"state", to_json(c.state)},
          {"gain", c.gain},
          {"completion", c.completion ? to_json(*c.completion) : nlohmann::json(nullptr)},
          {"actions", actions},
          {"extended", c.extended}};
}

std::vector<SearchNode*> expand(SearchNode& node, const Denoiser& model, const SearchConfig& cfg) {
  if (node.expanded) throw Error(ErrorKind::AlreadyExpanded, "node already expanded");
  if (node.data.state.complete()) throw Error(ErrorKind::NoMaskedPositions, "cannot expand a resolved state");
  return expand(node, model.predict(node.data.state), cfg);
}

std::vector<SearchNode*> expand(SearchNode& node, const DenoiserOutput& output, const SearchConfig& cfg) {
  if (node.expanded) throw Error(ErrorKind::AlreadyExpanded, "node already expanded");
  if (node.data.state.complete()) throw Error(ErrorKind::NoMaskedPositions, "cannot expand a resolved state");
  const ActionCandidates cands = build_candidates(node.data.state, output, cfg.k1, cfg.k2, cfg.score);
  std::vector<SearchNode*> children;
  for (const auto& sa : cands.pooled) {
    auto& edge = node.edges.emplace_back();
    edge.action = sa.action;
    edge.prior = sa.score;
    NodeData data;
    data.state = apply_action(node.data.state, sa.action);
    edge.child = std::make_unique<SearchNode>(std::move(data));
    children.push_back(edge.child.get());
  }
  node.expanded = true;
  return children;
}

SeqState rollout(const Denoiser& model, SeqState state, Rng& rng, const SearchConfig& cfg) {
  return rollout_from(model, std::move(state), std::nullopt, rng, cfg);
}

SimulationResult simulate(const Denoiser& model, const SeqState& state, const UnmaskAction& action, Rng& rng,
                          const SearchConfig& cfg) {
  if (state.complete()) throw Error(ErrorKind::NoMaskedPositions, "simulate on a fully resolved state");
  return simulate(model, state, entropy_profile(model, state), action, rng, cfg);
}

SimulationResult simulate(const Denoiser& model, const SeqState& state, const EntropyProfile& before,
                          const UnmaskAction& action, Rng& rng, const SearchConfig& cfg) {
  SimulationResult res;
  res.reward.action = action;
  res.reward.before = before;
  SeqState next = apply_action(state, action);
  std::optional<DenoiserOutput> after_out;
  if (!next.complete()) {
    after_out = model.predict(next);
    res.reward.after = entropy_profile(*after_out);
  }
  res.reward.r_ig = gain_ratio(before.total, res.reward.after.total);
  res.completion = rollout_from(model, std::move(next), std::move(after_out), rng, cfg);
  return res;
}

namespace {

class CgmctsRun {
 public:
  CgmctsRun(const Denoiser& model, const SeqState& root, const SearchConfig& cfg, Rng& rng,
            const SearchObserver& observer)
      : model_(model), cfg_(cfg), rng_(rng), observer_(observer), root_(NodeData{root, 0, 0, false, std::nullopt, 0}) {}

  CandidatePool run() {
    const DenoiserOutput root_out = model_.predict(root_.data.state);
    root_profile_ = entropy_profile(root_out);
    root_.data.entropy_total = root_profile_.total;
    budget_ = cfg_.simulation_budget();

    while (pool_.collected.size() < cfg_.candidate_count && pool_.simulations < budget_) {
      ++pool_.iterations;
      SearchPath path;
      SearchNode* node = &root_;
      while (node->expanded && !node->data.frozen && !node->edges.empty()) {
        const std::size_t e = ucb_select(*node, cfg_.c_explore);
        path.emplace_back(node, e);
        node = node->edges[e].child.get();
      }

      nlohmann::json line;
      if (cfg_.record_trace) {
        nlohmann::json sel = nlohmann::json::array();
        for (const auto& [n, e] : path) sel.push_back(to_json(n->edges[e].action));
        line = {{"iter", pool_.iterations}, {"selected_path", sel}};
      }

      std::vector<SearchNode*> qualifying;
      std::vector<double> rewards;
      nlohmann::json expanded = nlohmann::json::array();

      if (node->data.frozen) {
        // Depth-L_c leaf: simulate it if it never was, else re-credit its reward.
        auto [parent, e] = path.back();
        if (parent->edges[e].visits == 0) {
          SearchPath prefix(path.begin(), path.end() - 1);
          simulate_children(*parent, prefix, {node}, qualifying, rewards);
        } else {
          backpropagate<SearchNode>(path, node->data.reward);
          ++pool_.simulations;
          rewards.push_back(node->data.reward);
        }
      } else {
        const DenoiserOutput out = node == &root_ ? root_out : model_.predict(node->data.state);
        const std::vector<SearchNode*> children = expand(*node, out, cfg_);
        for (SearchNode* c : children) {
          c->data.id = next_id_++;
          c->data.frozen = c->data.state.revealed_count() >= cfg_.init_length;
        }
        for (const auto& edge : node->edges) expanded.push_back(to_json(edge.action));
        profiles_.emplace(node, entropy_profile(out));
        simulate_children(*node, path, children, qualifying, rewards);
      }

      offer(qualifying);
      if (cfg_.record_trace) {
        line["expanded_actions"] = expanded;
        line["reward"] = rewards;
        line["pool_size"] = pool_.collected.size();
        pool_.trace.push_back(std::move(line));
      }
      if (observer_) observer_(root_, pool_);
    }

    if (pool_.collected.size() < cfg_.candidate_count) {
      pool_.budget_exhausted = true;
      if (cfg_.fill_on_exhaustion) fill_by_extension();
    }
    return std::move(pool_);
  }

 private:
  // Simulates the not-yet-visited edges of `parent` leading to `children`,
  // in edge order, until the budget runs out.
  void simulate_children(SearchNode& parent, const SearchPath& path, const std::vector<SearchNode*>& children,
                         std::vector<SearchNode*>& qualifying, std::vector<double>& rewards) {
    auto prof_it = profiles_.find(&parent);
    if (prof_it == profiles_.end()) {
      prof_it = profiles_.emplace(&parent, entropy_profile(model_, parent.data.state)).first;
    }
    const EntropyProfile& before = prof_it->second;

    std::vector<Job> jobs;
    for (SearchNode* c : children) {
      if (pool_.simulations + jobs.size() >= budget_) break;
      jobs.push_back({c, rng_.fork_seed()});
    }

    std::vector<SimulationResult> results(jobs.size());
    auto edge_of = [&](const SearchNode* c) {
      for (std::size_t i = 0; i < parent.edges.size(); ++i) {
        if (parent.edges[i].child.get() == c) return i;
      }
      throw Error(ErrorKind::InvalidArgument, "child not attached to parent");
    };
    auto run_job = [&](std::size_t k) {
      Rng local(jobs[k].seed);
      return simulate(model_, parent.data.state, before, parent.edges[edge_of(jobs[k].child)].action, local, cfg_);
    };
    if (cfg_.parallel_rollouts && model_.concurrent_safe() && jobs.size() > 1) {
      std::vector<std::future<SimulationResult>> futures;
      for (std::size_t k = 0; k < jobs.size(); ++k) futures.push_back(std::async(std::launch::async, run_job, k));
      for (std::size_t k = 0; k < jobs.size(); ++k) results[k] = futures[k].get();
    } else {
      for (std::size_t k = 0; k < jobs.size(); ++k) results[k] = run_job(k);
    }

    // Results are applied in submission order regardless of how they ran.
    for (std::size_t k = 0; k < jobs.size(); ++k) {
      SearchNode* child = jobs[k].child;
      child->data.reward = results[k].reward.r_ig;
      child->data.entropy_total = results[k].reward.after.total;
      child->data.completion = std::move(results[k].completion);
      SearchPath full = path;
      full.emplace_back(&parent, edge_of(child));
      backpropagate<SearchNode>(full, child->data.reward);
      ++pool_.simulations;
      rewards.push_back(child->data.reward);
      if (child->data.frozen) {
        qualifying.push_back(child);
        std::vector<UnmaskAction> actions;
        for (const auto& [n, e] : full) actions.push_back(n->edges[e].action);
        paths_.emplace(child, std::move(actions));
      }
    }
  }

  double gain_of(double entropy_total) const { return gain_ratio(root_profile_.total, entropy_total); }

  // Newly qualifying nodes compete for the open slots by gain.
  void offer(std::vector<SearchNode*> qualifying) {
    std::stable_sort(qualifying.begin(), qualifying.end(), [&](const SearchNode* a, const SearchNode* b) {
      return gain_of(a->data.entropy_total) > gain_of(b->data.entropy_total);
    });
    for (SearchNode* n : qualifying) {
      if (pool_.collected.size() >= cfg_.candidate_count) break;
      if (!pooled_.insert(n->data.state).second) continue;
      Candidate c;
      c.state = n->data.state;
      c.gain = gain_of(n->data.entropy_total);
      c.completion = n->data.completion;
      c.actions = paths_.at(n);
      pool_.collected.push_back(std::move(c));
    }
  }

  void fill_by_extension() {
    struct Entry {
      const SearchNode* node;
      double incoming;
      std::vector<UnmaskAction> actions;
    };
    std::vector<Entry> nodes;
    std::vector<UnmaskAction> stack;
    auto visit = [&](auto&& self, const SearchNode& n, double incoming) -> void {
      nodes.push_back({&n, incoming, stack});
      for (const auto& e : n.edges) {
        stack.push_back(e.action);
        self(self, *e.child, e.visits ? e.mean() : -std::numeric_limits<double>::infinity());
        stack.pop_back();
      }
    };
    visit(visit, root_, -std::numeric_limits<double>::infinity());
    std::stable_sort(nodes.begin(), nodes.end(), [](const Entry& a, const Entry& b) {
      const auto ra = a.node->data.state.revealed_count(), rb = b.node->data.state.revealed_count();
      if (ra != rb) return ra > rb;
      if (a.incoming != b.incoming) return a.incoming > b.incoming;
      return a.node->data.id < b.node->data.id;
    });

    for (const Entry& entry : nodes) {
      if (pool_.collected.size() >= cfg_.candidate_count) break;
      SeqState state = entry.node->data.state;
      std::vector<UnmaskAction> actions = entry.actions;
      while (state.revealed_count() < cfg_.init_length) {
        const auto cands = build_candidates(state, model_.predict(state), cfg_.k1, cfg_.k2, cfg_.score);
        actions.push_back(cands.pooled.front().action);
        state = apply_action(state, actions.back());
      }
      if (pooled_.count(state)) continue;
      const EntropyProfile prof = entropy_profile(model_, state);
      Candidate c;
      c.state = state;
      c.gain = gain_of(prof.total);
      c.actions = std::move(actions);
      c.extended = true;
      pooled_.insert(state);
      pool_.collected.push_back(std::move(c));
    }
  }

  const Denoiser& model_;
  const SearchConfig& cfg_;
  Rng& rng_;
  const SearchObserver& observer_;
  SearchNode root_;
  EntropyProfile root_profile_;
  std::size_t budget_ = 0;
  std::size_t next_id_ = 1;
  CandidatePool pool_;
  std::unordered_set<SeqState, SeqStateHash> pooled_;
  std::unordered_map<const SearchNode*, EntropyProfile> profiles_;
  std::unordered_map<const SearchNode*, std::vector<UnmaskAction>> paths_;
};

}  // namespace

CandidatePool run_cgmcts(const Denoiser& model, const SeqState& root, const SearchConfig& cfg) {
  Rng rng(cfg.seed);
  return run_cgmcts(model, root, cfg, rng);
}

CandidatePool run_cgmcts(const Denoiser& model, const SeqState& root, const SearchConfig& cfg, Rng& rng,
                         const SearchObserver& observer) {
  cfg.validate(root.gen_len());
  if (cfg.init_length < 1) throw Error(ErrorKind::InvalidConfig, "init_length must be >= 1 for search");
  if (root.revealed_count() != 0) throw Error(ErrorKind::InvalidArgument, "search root must be fully masked");
  CgmctsRun run(model, root, cfg, rng, observer);
  return run.run();
}

}  // namespace medal
