#pragma once

#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "dpgba/graph.hpp"
#include "dpgba/tape.hpp"

namespace dpgba {

enum class GraphFormat { jsonl, planetoid };

struct LoadStats {
  int dropped_self_loops = 0;
  int dropped_duplicate_edges = 0;
  int dropped_unknown_refs = 0;
};

namespace detail {

[[noreturn]] inline void parse_fail(const std::string& path, int line,
                                    const std::string& what) {
  throw std::runtime_error(path + ":" + std::to_string(line) + ": " + what);
}

inline std::ifstream open_in(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  return f;
}

inline std::ofstream open_out(const std::string& path) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  return f;
}

// Dedup + self-loop filtering shared by both loaders. Edges arrive as
// position pairs.
inline void finish_edges(Graph& g, std::vector<std::pair<int, int>> raw,
                         LoadStats* stats) {
  std::vector<std::pair<int, int>> kept;
  kept.reserve(raw.size());
  for (auto& [u, v] : raw) {
    if (u == v) {
      if (stats) ++stats->dropped_self_loops;
      continue;
    }
    kept.emplace_back(std::min(u, v), std::max(u, v));
  }
  size_t before = kept.size();
  std::sort(kept.begin(), kept.end());
  kept.erase(std::unique(kept.begin(), kept.end()), kept.end());
  if (stats)
    stats->dropped_duplicate_edges += static_cast<int>(before - kept.size());
  g.edges = std::move(kept);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// jsonl: one object per line.
//   {"classes": ["a", "b"]}          optional, names the label indices
//   {"node": 7, "x": [...], "y": 2}  y null or absent marks unlabeled
//   {"edge": [7, 9]}                 by node id

inline Graph load_jsonl(const std::string& path, LoadStats* stats = nullptr) {
  auto f = detail::open_in(path);
  std::string line;
  int lineno = 0;
  std::vector<std::vector<double>> feats;
  Graph g;
  std::unordered_map<int64_t, int> pos_of;
  std::vector<std::pair<int, int>> raw_edges;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      detail::parse_fail(path, lineno, e.what());
    }
    if (j.contains("classes")) {
      for (auto& c : j["classes"]) g.label_names.push_back(c.get<std::string>());
    } else if (j.contains("node")) {
      if (!j.contains("x") || !j["x"].is_array())
        detail::parse_fail(path, lineno, "node record without feature array");
      int64_t id = j["node"].get<int64_t>();
      if (pos_of.count(id))
        detail::parse_fail(path, lineno,
                           "duplicate node id " + std::to_string(id));
      pos_of[id] = static_cast<int>(feats.size());
      feats.push_back(j["x"].get<std::vector<double>>());
      if (feats.size() > 1 && feats.back().size() != feats.front().size())
        detail::parse_fail(path, lineno, "inconsistent feature width");
      int y = -1;
      if (j.contains("y") && !j["y"].is_null()) y = j["y"].get<int>();
      g.labels.push_back(y);
      g.node_ids.push_back(id);
    } else if (j.contains("edge")) {
      auto e = j["edge"].get<std::vector<int64_t>>();
      if (e.size() != 2) detail::parse_fail(path, lineno, "edge arity");
      auto a = pos_of.find(e[0]);
      auto b = pos_of.find(e[1]);
      if (a == pos_of.end() || b == pos_of.end())
        detail::parse_fail(path, lineno, "edge references unknown node");
      raw_edges.emplace_back(a->second, b->second);
    } else {
      detail::parse_fail(path, lineno, "unrecognized record");
    }
  }
  if (feats.empty()) throw std::runtime_error(path + ": no nodes");
  g.features = Mat(feats.size(), feats.front().size());
  for (size_t i = 0; i < feats.size(); ++i)
    for (size_t k = 0; k < feats[i].size(); ++k) g.features(i, k) = feats[i][k];
  detail::finish_edges(g, std::move(raw_edges), stats);
  g.check_consistent();
  return g;
}

inline void save_jsonl(const Graph& g, const std::string& path) {
  auto f = detail::open_out(path);
  if (!g.label_names.empty()) {
    nlohmann::json j;
    j["classes"] = g.label_names;
    f << j.dump() << "\n";
  }
  for (int i = 0; i < g.num_nodes(); ++i) {
    nlohmann::json j;
    j["node"] = g.node_ids[i];
    std::vector<double> x(g.num_features());
    for (int k = 0; k < g.num_features(); ++k) x[k] = g.features(i, k);
    j["x"] = x;
    if (g.labels[i] >= 0)
      j["y"] = g.labels[i];
    else
      j["y"] = nullptr;
    f << j.dump() << "\n";
  }
  for (auto& [u, v] : g.edges) {
    nlohmann::json j;
    j["edge"] = {g.node_ids[u], g.node_ids[v]};
    f << j.dump() << "\n";
  }
}

// ---------------------------------------------------------------------------
// planetoid-style: <stem>.content rows "id f1 .. fd label", <stem>.cites rows
// "cited citing". Class indices follow lexicographic label order; the label
// token "_" marks an unlabeled node.

inline Graph load_planetoid(const std::string& stem,
                            LoadStats* stats = nullptr) {
  Graph g;
  std::vector<std::string> raw_labels;
  std::unordered_map<std::string, int> pos_of;
  std::vector<std::vector<double>> feats;
  std::vector<std::string> keys;
  {
    auto f = detail::open_in(stem + ".content");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::vector<std::string> tok;
      std::string t;
      while (ss >> t) tok.push_back(t);
      if (tok.size() < 3)
        detail::parse_fail(stem + ".content", lineno, "too few columns");
      if (pos_of.count(tok.front()))
        detail::parse_fail(stem + ".content", lineno,
                           "duplicate node id " + tok.front());
      pos_of[tok.front()] = static_cast<int>(feats.size());
      keys.push_back(tok.front());
      std::vector<double> x(tok.size() - 2);
      for (size_t k = 1; k + 1 < tok.size(); ++k) {
        try {
          x[k - 1] = std::stod(tok[k]);
        } catch (const std::exception&) {
          detail::parse_fail(stem + ".content", lineno,
                             "bad feature value '" + tok[k] + "'");
        }
      }
      if (!feats.empty() && x.size() != feats.front().size())
        detail::parse_fail(stem + ".content", lineno,
                           "inconsistent feature width");
      feats.push_back(std::move(x));
      raw_labels.push_back(tok.back());
    }
  }
  if (feats.empty()) throw std::runtime_error(stem + ".content: no nodes");

  std::vector<std::string> classes;
  for (auto& s : raw_labels)
    if (s != "_") classes.push_back(s);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  std::unordered_map<std::string, int> class_of;
  for (size_t i = 0; i < classes.size(); ++i)
    class_of[classes[i]] = static_cast<int>(i);

  g.features = Mat(feats.size(), feats.front().size());
  for (size_t i = 0; i < feats.size(); ++i) {
    for (size_t k = 0; k < feats[i].size(); ++k) g.features(i, k) = feats[i][k];
    g.labels.push_back(raw_labels[i] == "_" ? -1 : class_of[raw_labels[i]]);
    int64_t id = static_cast<int64_t>(i);
    try {
      id = std::stoll(keys[i]);
    } catch (const std::exception&) {
      // non-numeric ids keep their position as the stable id
    }
    g.node_ids.push_back(id);
  }
  g.label_names = classes;

  std::vector<std::pair<int, int>> raw_edges;
  {
    auto f = detail::open_in(stem + ".cites");
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::istringstream ss(line);
      std::string a, b;
      if (!(ss >> a >> b))
        detail::parse_fail(stem + ".cites", lineno, "expected two ids");
      auto pa = pos_of.find(a);
      auto pb = pos_of.find(b);
      if (pa == pos_of.end() || pb == pos_of.end()) {
        if (stats) ++stats->dropped_unknown_refs;
        continue;
      }
      raw_edges.emplace_back(pa->second, pb->second);
    }
  }
  detail::finish_edges(g, std::move(raw_edges), stats);
  g.check_consistent();
  return g;
}

inline void save_planetoid(const Graph& g, const std::string& stem) {
  {
    auto f = detail::open_out(stem + ".content");
    char buf[64];
    for (int i = 0; i < g.num_nodes(); ++i) {
      f << g.node_ids[i];
      for (int k = 0; k < g.num_features(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g", g.features(i, k));
        f << '\t' << buf;
      }
      int y = g.labels[i];
      f << '\t'
        << (y >= 0 ? (y < static_cast<int>(g.label_names.size())
                          ? g.label_names[y]
                          : std::to_string(y))
                   : std::string("_"))
        << "\n";
    }
  }
  {
    auto f = detail::open_out(stem + ".cites");
    for (auto& [u, v] : g.edges)
      f << g.node_ids[u] << '\t' << g.node_ids[v] << "\n";
  }
}

inline Graph load_graph(const std::string& path, GraphFormat fmt,
                        LoadStats* stats = nullptr) {
  return fmt == GraphFormat::jsonl ? load_jsonl(path, stats)
                                   : load_planetoid(path, stats);
}

inline void save_graph(const Graph& g, const std::string& path,
                       GraphFormat fmt) {
  if (fmt == GraphFormat::jsonl)
    save_jsonl(g, path);
  else
    save_planetoid(g, path);
}

// ---------------------------------------------------------------------------
// checkpoints: one parameter per line, {"name", "shape": [r, c], "values":
// row-major}

inline void save_params(const ParamSet& ps, const std::string& path) {
  auto f = detail::open_out(path);
  for (const Param* p : ps.all()) {
    nlohmann::json j;
    j["name"] = p->name;
    j["shape"] = {p->value.rows(), p->value.cols()};
    std::vector<double> v;
    v.reserve(p->value.size());
    for (int i = 0; i < p->value.rows(); ++i)
      for (int k = 0; k < p->value.cols(); ++k) v.push_back(p->value(i, k));
    j["values"] = v;
    f << j.dump() << "\n";
  }
}

// Loads into an already-constructed set; every named parameter must exist
// with the stored shape.
inline void load_params(ParamSet& ps, const std::string& path) {
  auto f = detail::open_in(path);
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      detail::parse_fail(path, lineno, e.what());
    }
    Param& p = ps.at(j["name"].get<std::string>());
    auto shape = j["shape"].get<std::vector<int>>();
    if (shape.size() != 2 || shape[0] != p.value.rows() ||
        shape[1] != p.value.cols())
      throw std::runtime_error(path + ": shape mismatch for " + p.name);
    auto v = j["values"].get<std::vector<double>>();
    if (static_cast<int>(v.size()) != p.value.size())
      throw std::runtime_error(path + ": value count mismatch for " + p.name);
    size_t idx = 0;
    for (int i = 0; i < p.value.rows(); ++i)
      for (int k = 0; k < p.value.cols(); ++k) p.value(i, k) = v[idx++];
  }
}

// ---------------------------------------------------------------------------
// csv

inline std::string format_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", x);
  return buf;
}

inline void write_csv(const std::string& path,
                      const std::vector<std::string>& header,
                      const std::vector<std::vector<std::string>>& rows) {
  auto f = detail::open_out(path);
  for (size_t i = 0; i < header.size(); ++i)
    f << (i ? "," : "") << header[i];
  f << "\n";
  for (auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) f << (i ? "," : "") << r[i];
    f << "\n";
  }
}

}  // namespace dpgba
