#pragma once

// Graph-based keyword ranking over a token co-occurrence graph.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace dialcal {

struct TextRankOptions {
  int window = 2;          // tokens within this span (after stop filtering) are linked
  double damping = 0.85;
  double tolerance = 1e-6; // L-infinity change between sweeps
  int max_iterations = 100;
};

struct RankedKeyword {
  std::string token;
  double score = 0.0;
};

/// Undirected co-occurrence graph over the content tokens of `sentences`.
/// Nodes are indexed in lexicographic token order; no self loops; edges do
/// not cross sentence boundaries.
struct CooccurrenceGraph {
  std::vector<std::string> nodes;
  std::vector<std::set<std::size_t>> adjacency;
};

inline CooccurrenceGraph build_cooccurrence_graph(const std::vector<std::vector<std::string>>& sentences,
                                                  const std::set<std::string>& stop_words, int window) {
  std::vector<std::vector<std::string>> filtered;
  std::map<std::string, std::size_t> index;
  for (const auto& s : sentences) {
    std::vector<std::string> keep;
    for (const auto& w : s)
      if (!stop_words.count(w)) {
        keep.push_back(w);
        index.emplace(w, 0);
      }
    filtered.push_back(std::move(keep));
  }
  CooccurrenceGraph g;
  for (auto& [w, id] : index) {
    id = g.nodes.size();
    g.nodes.push_back(w);
  }
  g.adjacency.resize(g.nodes.size());
  for (const auto& s : filtered)
    for (std::size_t i = 0; i < s.size(); ++i)
      for (std::size_t j = i + 1; j < s.size() && j < i + static_cast<std::size_t>(window); ++j) {
        const std::size_t a = index[s[i]], b = index[s[j]];
        if (a == b) continue;
        g.adjacency[a].insert(b);
        g.adjacency[b].insert(a);
      }
  return g;
}

/// Damped stationary scores with uniform teleport:
///   S(v) <- (1 - d)/N + d * sum_{u ~ v} S(u) / deg(u)
/// Isolated nodes keep only the teleport mass.
inline std::vector<double> textrank_scores(const CooccurrenceGraph& g, const TextRankOptions& opt = {}) {
  const std::size_t n = g.nodes.size();
  if (n == 0) return {};
  std::vector<double> s(n, 1.0 / static_cast<double>(n)), next(n);
  for (int it = 0; it < opt.max_iterations; ++it) {
    double delta = 0.0;
    for (std::size_t v = 0; v < n; ++v) {
      double acc = 0.0;
      for (std::size_t u : g.adjacency[v]) acc += s[u] / static_cast<double>(g.adjacency[u].size());
      next[v] = (1.0 - opt.damping) / static_cast<double>(n) + opt.damping * acc;
      delta = std::max(delta, std::abs(next[v] - s[v]));
    }
    s.swap(next);
    if (delta < opt.tolerance) break;
  }
  return s;
}

/// All content tokens of `sentences` ranked by score, ties broken lexicographically.
inline std::vector<RankedKeyword> textrank_ranking(const std::vector<std::vector<std::string>>& sentences,
                                                   const std::set<std::string>& stop_words,
                                                   const TextRankOptions& opt = {}) {
  const auto g = build_cooccurrence_graph(sentences, stop_words, opt.window);
  const auto scores = textrank_scores(g, opt);
  std::vector<RankedKeyword> out;
  for (std::size_t i = 0; i < g.nodes.size(); ++i) out.push_back({g.nodes[i], scores[i]});
  std::stable_sort(out.begin(), out.end(), [](const RankedKeyword& a, const RankedKeyword& b) {
    return a.score > b.score;  // nodes are already in lexicographic order
  });
  return out;
}

inline std::vector<RankedKeyword> textrank_keywords(const std::vector<std::vector<std::string>>& sentences,
                                                    std::size_t top_k, const std::set<std::string>& stop_words = {},
                                                    const TextRankOptions& opt = {}) {
  if (top_k < 1) throw std::invalid_argument("top_k must be >= 1");
  auto ranked = textrank_ranking(sentences, stop_words, opt);
  if (ranked.size() > top_k) ranked.resize(top_k);
  return ranked;
}

inline std::vector<RankedKeyword> textrank_keywords(const std::vector<std::string>& text, std::size_t top_k,
                                                    const std::set<std::string>& stop_words = {},
                                                    const TextRankOptions& opt = {}) {
  return textrank_keywords(std::vector<std::vector<std::string>>{text}, top_k, stop_words, opt);
}

}  // namespace dialcal
