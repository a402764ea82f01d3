#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "targetkit/common.hpp"

#include <json.hpp>

namespace targetkit {

enum class ColumnKind { binary, numeric, categorical_encoded };

inline const char* to_string(ColumnKind k) {
  switch (k) {
    case ColumnKind::binary: return "binary";
    case ColumnKind::numeric: return "numeric";
    case ColumnKind::categorical_encoded: return "categorical-encoded";
  }
  return "numeric";
}

// Declared treatment arms; control_index marks the null arm.
struct ArmSet {
  std::vector<std::string> labels;
  std::size_t control_index = 0;

  std::size_t size() const { return labels.size(); }

  std::size_t index_of(const std::string& label) const {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] == label) return i;
    }
    throw domain_error("unknown arm label: " + label);
  }

  bool contains(const std::string& label) const {
    for (const auto& l : labels) {
      if (l == label) return true;
    }
    return false;
  }

  void validate() const {
    if (labels.size() < 2) throw config_error("arm set needs at least 2 labels");
    if (control_index >= labels.size()) {
      throw config_error("control_index out of range");
    }
    std::set<std::string> uniq(labels.begin(), labels.end());
    if (uniq.size() != labels.size()) throw config_error("arm labels must be unique");
  }
};

// The single source of truth for an experiment: covariates, arm, outcome,
// optional pair ids (paired designs) and the mentor-selection flag.
// Immutable after construction; safe to share across threads.
struct ExperimentTable {
  Matrix covariates;  // n_rows x d
  std::vector<std::string> covariate_names;
  std::vector<ColumnKind> covariate_kinds;
  std::vector<int> arm;  // index into arms.labels
  ArmSet arms;
  std::vector<double> outcome;
  bool outcome_binary = false;
  std::vector<long> pair_id;  // -1 = unpaired; empty vector = column absent
  std::vector<int> selected;  // empty vector = column absent

  std::size_t n_rows() const { return arm.size(); }
  std::size_t n_covariates() const { return covariates.cols(); }
  bool has_pairs() const { return !pair_id.empty(); }
  bool has_selected() const { return !selected.empty(); }

  std::size_t covariate_index(const std::string& name) const {
    for (std::size_t j = 0; j < covariate_names.size(); ++j) {
      if (covariate_names[j] == name) return j;
    }
    throw config_error("unknown covariate column: " + name);
  }

  void validate() const {
    arms.validate();
    const std::size_t n = n_rows();
    if (outcome.size() != n || covariates.rows() != n) {
      throw config_error("table column lengths disagree");
    }
    if (!pair_id.empty() && pair_id.size() != n) {
      throw config_error("pair_id length disagrees");
    }
    if (!selected.empty() && selected.size() != n) {
      throw config_error("selected length disagrees");
    }
    std::vector<char> seen(arms.size(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      if (arm[i] < 0 || std::size_t(arm[i]) >= arms.size()) {
        throw config_error("row arm outside declared arm set");
      }
      seen[arm[i]] = 1;
      if (!std::isfinite(outcome[i])) {
        throw config_error("non-finite outcome at row " + std::to_string(i));
      }
      if (outcome_binary && outcome[i] != 0.0 && outcome[i] != 1.0) {
        throw config_error("binary-declared outcome not in {0,1} at row " +
                           std::to_string(i));
      }
    }
    int present = 0;
    for (char s : seen) present += s;
    if (present < 2) throw config_error("fewer than 2 arms present in data");
    if (!pair_id.empty()) {
      std::map<long, std::set<int>> arms_in_pair;
      for (std::size_t i = 0; i < n; ++i) {
        if (pair_id[i] < 0) continue;
        auto& s = arms_in_pair[pair_id[i]];
        if (!s.insert(arm[i]).second) {
          throw config_error("pair " + std::to_string(pair_id[i]) +
                             " has two rows with the same arm");
        }
      }
    }
  }
};

// Row indices observed in the given arm. Unions over all arms cover the table.
inline std::vector<std::size_t> split_by_arm(const ExperimentTable& table,
                                             const std::string& label) {
  const std::size_t a = table.arms.index_of(label);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < table.n_rows(); ++i) {
    if (std::size_t(table.arm[i]) == a) out.push_back(i);
  }
  return out;
}

inline std::vector<std::size_t> split_by_arm(const ExperimentTable& table,
                                             std::size_t arm_index) {
  if (arm_index >= table.arms.size()) throw domain_error("arm index out of range");
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < table.n_rows(); ++i) {
    if (std::size_t(table.arm[i]) == arm_index) out.push_back(i);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Schema: a JSON config mapping column name -> role.
// Roles: arm | outcome | covariate:numeric | covariate:categorical |
//        pair_id | selected
// ---------------------------------------------------------------------------

enum class ColumnRole { arm, outcome, covariate_numeric, covariate_categorical, pair, selected };

struct Schema {
  std::vector<std::pair<std::string, ColumnRole>> columns;  // declaration order
  ArmSet arms;
  bool outcome_binary = false;

  static ColumnRole parse_role(const std::string& role) {
    if (role == "arm") return ColumnRole::arm;
    if (role == "outcome") return ColumnRole::outcome;
    if (role == "covariate:numeric") return ColumnRole::covariate_numeric;
    if (role == "covariate:categorical") return ColumnRole::covariate_categorical;
    if (role == "pair_id") return ColumnRole::pair;
    if (role == "selected") return ColumnRole::selected;
    throw config_error("unknown column role: " + role);
  }

  static Schema from_json(const nlohmann::json& j) {
    Schema s;
    for (auto it = j.begin(); it != j.end(); ++it) {
      const std::string& key = it.key();
      if (key != "columns" && key != "arms" && key != "control" &&
          key != "outcome_binary") {
        throw config_error("schema: unknown key '" + key + "'");
      }
    }
    if (!j.contains("columns") || !j["columns"].is_object()) {
      throw config_error("schema: 'columns' object required");
    }
    for (auto it = j["columns"].begin(); it != j["columns"].end(); ++it) {
      s.columns.emplace_back(it.key(), parse_role(it.value().get<std::string>()));
    }
    if (!j.contains("arms") || !j["arms"].is_array()) {
      throw config_error("schema: 'arms' array required");
    }
    for (const auto& a : j["arms"]) s.arms.labels.push_back(a.get<std::string>());
    if (!j.contains("control")) throw config_error("schema: 'control' required");
    const std::string control = j["control"].get<std::string>();
    if (!s.arms.contains(control)) {
      throw config_error("schema: control arm '" + control + "' not in arms");
    }
    s.arms.control_index = s.arms.index_of(control);
    if (j.contains("outcome_binary")) s.outcome_binary = j["outcome_binary"].get<bool>();
    s.arms.validate();
    int n_arm = 0, n_outcome = 0;
    for (const auto& [name, role] : s.columns) {
      (void)name;
      n_arm += role == ColumnRole::arm;
      n_outcome += role == ColumnRole::outcome;
    }
    if (n_arm != 1) throw config_error("schema: exactly one arm column required");
    if (n_outcome != 1) throw config_error("schema: exactly one outcome column required");
    return s;
  }

  nlohmann::json to_json() const {
    nlohmann::json cols = nlohmann::json::object();
    for (const auto& [name, role] : columns) {
      const char* r = "";
      switch (role) {
        case ColumnRole::arm: r = "arm"; break;
        case ColumnRole::outcome: r = "outcome"; break;
        case ColumnRole::covariate_numeric: r = "covariate:numeric"; break;
        case ColumnRole::covariate_categorical: r = "covariate:categorical"; break;
        case ColumnRole::pair: r = "pair_id"; break;
        case ColumnRole::selected: r = "selected"; break;
      }
      cols[name] = r;
    }
    return {{"columns", cols},
            {"arms", arms.labels},
            {"control", arms.labels[arms.control_index]},
            {"outcome_binary", outcome_binary}};
  }
};

inline Schema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open schema file: " + path);
  nlohmann::json j;
  in >> j;
  return Schema::from_json(j);
}

struct IngestReport {
  std::size_t rows_dropped = 0;
  std::vector<long> incomplete_pairs;  // pair ids with a single surviving member
  std::vector<std::string> notes;
};

struct IngestResult {
  ExperimentTable table;
  IngestReport report;
};

namespace detail {

// One CSV record; handles quoted fields with doubled quotes.
inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t lineno) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur.push_back(c);
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(cur);
      cur.clear();
    } else if (c == '\r' && i + 1 == line.size()) {
      // trailing CR from CRLF files
    } else {
      cur.push_back(c);
    }
  }
  if (quoted) {
    throw config_error("line " + std::to_string(lineno) + ": unterminated quote");
  }
  fields.push_back(cur);
  return fields;
}

inline bool cell_missing(const std::string& s) {
  if (s.empty()) return true;
  std::string t;
  for (char c : s) t.push_back(char(std::tolower(static_cast<unsigned char>(c))));
  return t == "na" || t == "nan" || t == "null";
}

inline double parse_double_cell(const std::string& s, std::size_t lineno,
                                const std::string& col) {
  double v = 0.0;
  const char* b = s.data();
  const char* e = s.data() + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc{} || p != e) {
    throw config_error("line " + std::to_string(lineno) + ": cannot parse '" + s +
                       "' in column '" + col + "' as a number");
  }
  return v;
}

inline long parse_long_cell(const std::string& s, std::size_t lineno,
                            const std::string& col) {
  long v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size()) {
    throw config_error("line " + std::to_string(lineno) + ": cannot parse '" + s +
                       "' in column '" + col + "' as an integer");
  }
  return v;
}

// Shortest representation that parses back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  (void)ec;
  return std::string(buf, p);
}

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace detail

// Reads a UTF-8, comma-delimited CSV with a header row. Rows with missing
// required cells are dropped and counted; unparseable cells are hard errors
// carrying the line number. Categorical covariates are one-hot encoded with
// lexicographic level order, keeping all levels.
inline IngestResult ingest_csv(const std::string& path, const Schema& schema) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open input file: " + path);

  std::string line;
  if (!std::getline(in, line)) throw config_error("empty file: " + path);
  const std::vector<std::string> header = detail::split_csv_line(line, 1);
  std::unordered_map<std::string, std::size_t> col_pos;
  for (std::size_t i = 0; i < header.size(); ++i) col_pos[header[i]] = i;
  for (const auto& [name, role] : schema.columns) {
    (void)role;
    if (!col_pos.count(name)) {
      throw config_error("schema column '" + name + "' missing from " + path);
    }
  }

  struct RawRow {
    std::vector<std::string> cells;
    std::size_t lineno;
  };
  std::vector<RawRow> raw;
  std::size_t dropped = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cells = detail::split_csv_line(line, lineno);
    if (cells.size() != header.size()) {
      throw config_error("line " + std::to_string(lineno) + ": expected " +
                         std::to_string(header.size()) + " fields, got " +
                         std::to_string(cells.size()));
    }
    bool missing = false;
    for (const auto& [name, role] : schema.columns) {
      if (role == ColumnRole::pair) continue;  // optional per row
      if (detail::cell_missing(cells[col_pos[name]])) {
        missing = true;
        break;
      }
    }
    if (missing) {
      ++dropped;
      continue;
    }
    raw.push_back({std::move(cells), lineno});
  }

  // Collect categorical levels over surviving rows.
  std::map<std::string, std::set<std::string>> levels;
  for (const auto& [name, role] : schema.columns) {
    if (role != ColumnRole::covariate_categorical) continue;
    auto& lv = levels[name];
    for (const auto& r : raw) lv.insert(r.cells[col_pos.at(name)]);
  }

  ExperimentTable t;
  t.arms = schema.arms;
  t.outcome_binary = schema.outcome_binary;
  for (const auto& [name, role] : schema.columns) {
    if (role == ColumnRole::covariate_numeric) {
      t.covariate_names.push_back(name);
    } else if (role == ColumnRole::covariate_categorical) {
      for (const auto& lv : levels[name]) t.covariate_names.push_back(name + "=" + lv);
    }
  }

  const std::size_t n = raw.size();
  const std::size_t d = t.covariate_names.size();
  t.covariates = Matrix(n, d);
  t.arm.resize(n);
  t.outcome.resize(n);
  bool any_pair = false, any_selected = false;
  for (const auto& [name, role] : schema.columns) {
    (void)name;
    any_pair |= role == ColumnRole::pair;
    any_selected |= role == ColumnRole::selected;
  }
  if (any_pair) t.pair_id.assign(n, -1);
  if (any_selected) t.selected.assign(n, 0);

  for (std::size_t i = 0; i < n; ++i) {
    const auto& cells = raw[i].cells;
    const std::size_t ln = raw[i].lineno;
    std::size_t j = 0;
    for (const auto& [name, role] : schema.columns) {
      const std::string& cell = cells[col_pos.at(name)];
      switch (role) {
        case ColumnRole::arm: {
          if (!t.arms.contains(cell)) {
            throw config_error("line " + std::to_string(ln) + ": arm label '" + cell +
                               "' not in declared arm set");
          }
          t.arm[i] = int(t.arms.index_of(cell));
          break;
        }
        case ColumnRole::outcome:
          t.outcome[i] = detail::parse_double_cell(cell, ln, name);
          break;
        case ColumnRole::covariate_numeric:
          t.covariates(i, j++) = detail::parse_double_cell(cell, ln, name);
          break;
        case ColumnRole::covariate_categorical:
          for (const auto& lv : levels[name]) {
            t.covariates(i, j++) = (cell == lv) ? 1.0 : 0.0;
          }
          break;
        case ColumnRole::pair:
          if (!detail::cell_missing(cell)) {
            t.pair_id[i] = detail::parse_long_cell(cell, ln, name);
          }
          break;
        case ColumnRole::selected: {
          const double v = detail::parse_double_cell(cell, ln, name);
          if (v != 0.0 && v != 1.0) {
            throw config_error("line " + std::to_string(ln) +
                               ": selected flag must be 0 or 1");
          }
          t.selected[i] = int(v);
          break;
        }
      }
    }
  }

  // Column kinds.
  std::size_t j = 0;
  for (const auto& [name, role] : schema.columns) {
    (void)name;
    if (role == ColumnRole::covariate_numeric) {
      bool binary = true;
      for (std::size_t i = 0; i < n && binary; ++i) {
        binary = t.covariates(i, j) == 0.0 || t.covariates(i, j) == 1.0;
      }
      t.covariate_kinds.push_back(binary ? ColumnKind::binary : ColumnKind::numeric);
      ++j;
    } else if (role == ColumnRole::covariate_categorical) {
      for (std::size_t k = 0; k < levels[name].size(); ++k) {
        t.covariate_kinds.push_back(ColumnKind::categorical_encoded);
      }
      j += levels[name].size();
    }
  }

  t.validate();

  IngestReport rep;
  rep.rows_dropped = dropped;
  if (dropped > 0) {
    rep.notes.push_back(std::to_string(dropped) + " row" + (dropped == 1 ? "" : "s") +
                        " dropped due to missing values");
  }
  if (t.has_pairs()) {
    std::map<long, int> count;
    for (long p : t.pair_id) {
      if (p >= 0) ++count[p];
    }
    for (const auto& [p, c] : count) {
      if (c == 1) rep.incomplete_pairs.push_back(p);
    }
    if (!rep.incomplete_pairs.empty()) {
      rep.notes.push_back(std::to_string(rep.incomplete_pairs.size()) +
                          " pair(s) have a single surviving member");
    }
  }
  return {std::move(t), std::move(rep)};
}

// Writes a table so that re-ingesting with derived_schema() reproduces it
// bitwise (shortest round-trip float formatting).
inline void write_csv(const ExperimentTable& t, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot open output file: " + path);
  for (std::size_t j = 0; j < t.covariate_names.size(); ++j) {
    out << detail::csv_escape(t.covariate_names[j]) << ',';
  }
  out << "arm,outcome";
  if (t.has_pairs()) out << ",pair_id";
  if (t.has_selected()) out << ",selected";
  out << '\n';
  for (std::size_t i = 0; i < t.n_rows(); ++i) {
    for (std::size_t j = 0; j < t.n_covariates(); ++j) {
      out << detail::format_double(t.covariates(i, j)) << ',';
    }
    out << detail::csv_escape(t.arms.labels[t.arm[i]]) << ','
        << detail::format_double(t.outcome[i]);
    if (t.has_pairs()) {
      out << ',';
      if (t.pair_id[i] >= 0) out << t.pair_id[i];
    }
    if (t.has_selected()) out << ',' << t.selected[i];
    out << '\n';
  }
}

// Schema describing a written table: every covariate is numeric after encoding.
inline Schema derived_schema(const ExperimentTable& t) {
  Schema s;
  s.arms = t.arms;
  s.outcome_binary = t.outcome_binary;
  for (const auto& name : t.covariate_names) {
    s.columns.emplace_back(name, ColumnRole::covariate_numeric);
  }
  s.columns.emplace_back("arm", ColumnRole::arm);
  s.columns.emplace_back("outcome", ColumnRole::outcome);
  if (t.has_pairs()) s.columns.emplace_back("pair_id", ColumnRole::pair);
  if (t.has_selected()) s.columns.emplace_back("selected", ColumnRole::selected);
  return s;
}

}  // namespace targetkit
