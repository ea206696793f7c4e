#pragma once

#include <algorithm>
#include <cstdint>
#include <queue>
#include <random>
#include <set>
#include <utility>
#include <vector>

#include "untangle/common.hpp"

namespace untangle {

using Edge = std::pair<int, int>;

/// Directed acyclic graph over nodes 0..p-1. Immutable after construction;
/// the topological order is computed once and cached.
class Dag {
 public:
  Dag() : p_(0) {}

  Dag(int p, const std::vector<Edge>& edges) : p_(p), adj_(p, std::vector<bool>(p, false)) {
    require(p >= 0, "Dag: negative node count");
    for (const auto& [i, j] : edges) {
      require(i >= 0 && i < p && j >= 0 && j < p, "Dag: edge endpoint out of range");
      require(i != j, "Dag: self-loop");
      adj_[i][j] = true;
    }
    topo_ = topological_order_or_throw();
  }

  int num_nodes() const { return p_; }

  bool has_edge(int i, int j) const { return adj_[i][j]; }

  int num_edges() const {
    int n = 0;
    for (int i = 0; i < p_; ++i)
      for (int j = 0; j < p_; ++j) n += adj_[i][j] ? 1 : 0;
    return n;
  }

  std::vector<Edge> edges() const {
    std::vector<Edge> out;
    for (int i = 0; i < p_; ++i)
      for (int j = 0; j < p_; ++j)
        if (adj_[i][j]) out.emplace_back(i, j);
    return out;
  }

  const std::vector<int>& topological_order() const { return topo_; }

  std::vector<int> parents(int j) const {
    std::vector<int> out;
    for (int i = 0; i < p_; ++i)
      if (adj_[i][j]) out.push_back(i);
    return out;
  }

  std::vector<int> children(int i) const {
    std::vector<int> out;
    for (int j = 0; j < p_; ++j)
      if (adj_[i][j]) out.push_back(j);
    return out;
  }

  /// Strict descendants of i (nodes reachable by a directed path).
  std::vector<int> descendants(int i) const {
    std::vector<bool> seen(p_, false);
    std::queue<int> q;
    q.push(i);
    while (!q.empty()) {
      int u = q.front();
      q.pop();
      for (int v = 0; v < p_; ++v)
        if (adj_[u][v] && !seen[v]) {
          seen[v] = true;
          q.push(v);
        }
    }
    std::vector<int> out;
    for (int v = 0; v < p_; ++v)
      if (seen[v]) out.push_back(v);
    return out;
  }

  std::vector<int> ancestors(int j) const {
    std::vector<int> out;
    for (int i = 0; i < p_; ++i) {
      if (i == j) continue;
      auto de = descendants(i);
      if (std::find(de.begin(), de.end(), j) != de.end()) out.push_back(i);
    }
    return out;
  }

  /// Maximal children of i: children j with pa(j) ∩ de(i) empty.
  std::vector<int> maximal_children(int i) const {
    auto de = descendants(i);
    std::set<int> de_set(de.begin(), de.end());
    std::vector<int> out;
    for (int j : children(i)) {
      bool maximal = true;
      for (int k : parents(j))
        if (de_set.count(k)) {
          maximal = false;
          break;
        }
      if (maximal) out.push_back(j);
    }
    return out;
  }

  /// Descendants of i including i itself.
  std::vector<int> closed_descendants(int i) const {
    auto out = descendants(i);
    out.push_back(i);
    std::sort(out.begin(), out.end());
    return out;
  }

  bool operator==(const Dag& other) const { return p_ == other.p_ && adj_ == other.adj_; }

 private:
  std::vector<int> topological_order_or_throw() const {
    std::vector<int> indeg(p_, 0);
    for (int i = 0; i < p_; ++i)
      for (int j = 0; j < p_; ++j) indeg[j] += adj_[i][j] ? 1 : 0;
    std::priority_queue<int, std::vector<int>, std::greater<int>> ready;
    for (int i = 0; i < p_; ++i)
      if (indeg[i] == 0) ready.push(i);
    std::vector<int> order;
    while (!ready.empty()) {
      int u = ready.top();
      ready.pop();
      order.push_back(u);
      for (int v = 0; v < p_; ++v)
        if (adj_[u][v] && --indeg[v] == 0) ready.push(v);
    }
    require(static_cast<int>(order.size()) == p_, "Dag: graph has a cycle");
    return order;
  }

  int p_;
  std::vector<std::vector<bool>> adj_;
  std::vector<int> topo_;
};

/// i→j in the output iff a directed path i⇝j exists in the input. Idempotent.
inline Dag transitive_closure(const Dag& g) {
  int p = g.num_nodes();
  std::vector<Edge> edges;
  for (int i = 0; i < p; ++i)
    for (int j : g.descendants(i)) edges.emplace_back(i, j);
  return Dag(p, edges);
}

/// Relabels nodes: i→j in the result iff perm[i]→perm[j] in g.
inline Dag permute_dag(const Dag& g, const std::vector<int>& perm) {
  int p = g.num_nodes();
  require(static_cast<int>(perm.size()) == p, "permute_dag: permutation size mismatch");
  std::vector<Edge> edges;
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j)
      if (g.has_edge(perm[i], perm[j])) edges.emplace_back(i, j);
  return Dag(p, edges);
}

/// Random DAG with the given expected edge density over a random topological
/// order of the labels.
inline Dag random_dag(int p, double edge_prob, std::uint64_t seed) {
  auto rng = make_rng(seed, 17);
  std::vector<int> order(p);
  for (int i = 0; i < p; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<Edge> edges;
  for (int a = 0; a < p; ++a)
    for (int b = a + 1; b < p; ++b)
      if (unif(rng) < edge_prob) edges.emplace_back(order[a], order[b]);
  return Dag(p, edges);
}

inline Dag chain_dag(int p) {
  std::vector<Edge> edges;
  for (int i = 0; i + 1 < p; ++i) edges.emplace_back(i, i + 1);
  return Dag(p, edges);
}

}  // namespace untangle
