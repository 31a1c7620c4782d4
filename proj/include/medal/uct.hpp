#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "medal/error.hpp"

namespace medal {

/// Search tree node shared by the token-level search and the schedule
/// search. `visits` counts the node's own creation plus every backprop that
/// passed through it, so visits == 1 + sum of edge visits.
template <class Data, class Action>
struct TreeNode {
  struct Edge {
    Action action{};
    double prior = 0;  // ordering signal for unvisited edges
    std::uint64_t visits = 0;
    double total = 0;
    std::unique_ptr<TreeNode> child;

    double mean() const { return visits > 0 ? total / static_cast<double>(visits) : 0.0; }
  };

  Data data{};
  std::uint64_t visits = 1;
  std::vector<Edge> edges;
  bool expanded = false;

  TreeNode() = default;
  explicit TreeNode(Data d) : data(std::move(d)) {}
};

template <class Node>
using PathStep = std::pair<Node*, std::size_t>;  // node, edge index

namespace detail {

// True when edge a should win over edge b under equal keys.
template <class Edge>
bool edge_precedes(const Edge& a, const Edge& b) {
  if (a.prior != b.prior) return a.prior > b.prior;
  return a.action < b.action;
}

}  // namespace detail

/// Index of the edge maximizing Q + c * sqrt(ln N(x) / N(x,a)). Unvisited
/// edges come first, ordered by prior; remaining ties fall to the edge with
/// the higher prior, then the smaller action.
template <class Node>
std::size_t ucb_select(const Node& node, double c_explore) {
  if (node.edges.empty()) throw Error(ErrorKind::NoChildren, "node has no children");

  std::size_t best = node.edges.size();
  for (std::size_t i = 0; i < node.edges.size(); ++i) {
    const auto& e = node.edges[i];
    if (e.visits != 0) continue;
    if (best == node.edges.size() || detail::edge_precedes(e, node.edges[best])) best = i;
  }
  if (best != node.edges.size()) return best;

  const double log_n = std::log(static_cast<double>(node.visits));
  double best_value = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < node.edges.size(); ++i) {
    const auto& e = node.edges[i];
    const double value = e.mean() + c_explore * std::sqrt(log_n / static_cast<double>(e.visits));
    if (best == node.edges.size() || value > best_value ||
        (value == best_value && detail::edge_precedes(e, node.edges[best]))) {
      best = i;
      best_value = value;
    }
  }
  return best;
}

template <class Node>
void backpropagate(std::span<const PathStep<Node>> path, double reward) {
  for (const auto& [node, edge] : path) {
    node->visits += 1;
    auto& e = node->edges.at(edge);
    e.visits += 1;
    e.total += reward;
  }
}

/// Checks the visit identity on every node of a subtree.
template <class Node>
bool visit_counts_consistent(const Node& node) {
  std::uint64_t sum = 0;
  for (const auto& e : node.edges) {
    sum += e.visits;
    if (e.child && !visit_counts_consistent(*e.child)) return false;
  }
  return node.visits == sum + 1;
}

}  // namespace medal
