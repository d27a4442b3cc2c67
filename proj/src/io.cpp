#include "aptab/io.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <fmt/format.h>
#include <json.hpp>

namespace aptab {
namespace {

constexpr std::string_view kCsvTag = "aptab-dataset ";
constexpr char kBinaryMagic[4] = {'A', 'P', 'T', 'D'};
constexpr std::uint32_t kBinaryVersion = 1;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::optional<double> parse_number(std::string_view cell) {
  cell = trim(cell);
  if (cell.empty()) return std::nullopt;
  if (cell.front() == '+') cell.remove_prefix(1);
  double value = 0;
  const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), value);
  if (ec != std::errc{} || ptr != cell.data() + cell.size() || !std::isfinite(value)) {
    return std::nullopt;
  }
  return value;
}

bool is_missing_cell(const std::string& cell, const std::set<std::string>& markers) {
  return markers.count(std::string(trim(cell))) > 0;
}

std::vector<std::string> column_cells(const CsvTable& t, std::size_t col) {
  std::vector<std::string> cells;
  cells.reserve(t.rows.size());
  for (const auto& row : t.rows) cells.push_back(col < row.size() ? row[col] : std::string{});
  return cells;
}

std::optional<std::size_t> find_column(const CsvTable& t, const std::string& name) {
  const auto it = std::find(t.header.begin(), t.header.end(), name);
  if (it == t.header.end()) return std::nullopt;
  return static_cast<std::size_t>(it - t.header.begin());
}

void fail_io(const std::filesystem::path& path, std::string_view what) {
  throw std::runtime_error(fmt::format("{}: {}", path.string(), what));
}

// Codes a categorical column; new strings extend the dictionary when allowed.
std::vector<std::optional<std::size_t>> encode_categories(const std::vector<std::string>& cells,
                                                          ColumnSchema& schema,
                                                          const std::set<std::string>& markers,
                                                          bool extend) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t k = 0; k < schema.categories.size(); ++k) index[schema.categories[k]] = k;
  std::vector<std::optional<std::size_t>> codes(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    if (is_missing_cell(cells[i], markers)) continue;
    const std::string key(trim(cells[i]));
    auto it = index.find(key);
    if (it == index.end()) {
      if (!extend) continue;
      it = index.emplace(key, schema.categories.size()).first;
      schema.categories.push_back(key);
    }
    codes[i] = it->second;
  }
  return codes;
}

Ingested decode_annotated(const CsvTable& t, const nlohmann::json& meta) {
  Ingested out;
  Dataset& d = out.data;
  d.task = parse_task_kind(meta.at("task").get<std::string>());
  d.num_classes = meta.value("num_classes", std::size_t{0});
  d.categorical = meta.at("categorical").get<std::vector<std::uint8_t>>();
  const std::size_t cols = d.categorical.size();
  if (t.header.size() != cols + 1) throw std::runtime_error("annotated CSV: column count mismatch");
  const std::size_t n = t.rows.size();
  std::vector<Real> x(n * cols, 0);
  std::vector<Real> y(n, 0);
  std::vector<std::uint8_t> missing(n * cols, 0);
  bool any_missing = false;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& row = t.rows[i];
    if (row.size() != cols + 1) {
      throw std::runtime_error(fmt::format("annotated CSV: row {} has {} fields", i + 1, row.size()));
    }
    for (std::size_t j = 0; j < cols; ++j) {
      if (trim(row[j]).empty()) {
        missing[i * cols + j] = 1;
        any_missing = true;
        continue;
      }
      const auto v = parse_number(row[j]);
      if (!v) throw std::runtime_error(fmt::format("annotated CSV: bad number '{}'", row[j]));
      x[i * cols + j] = static_cast<Real>(*v);
    }
    const auto target = parse_number(row[cols]);
    if (d.task == TaskKind::kClassification) {
      const int label = target ? static_cast<int>(*target) : -1;
      d.labels.push_back(label);
      y[i] = static_cast<Real>(label);
    } else {
      y[i] = target ? static_cast<Real>(*target) : std::numeric_limits<Real>::quiet_NaN();
    }
  }
  d.x = Tensor({n, cols}, std::move(x));
  d.y = Tensor::vector(std::move(y));
  if (any_missing) d.missing = std::move(missing);
  out.schema.task = d.task;
  out.schema.target = ColumnSchema{t.header.back(), ColumnKind::kTarget, {}, 0, 0};
  for (std::size_t j = 0; j < cols; ++j) {
    out.schema.features.push_back(ColumnSchema{
        t.header[j], d.categorical[j] ? ColumnKind::kCategorical : ColumnKind::kNumeric, {}, 0, 0});
  }
  return out;
}

}  // namespace

const std::set<std::string>& default_missing_markers() {
  static const std::set<std::string> markers{"", "?", "NA", "NaN", "nan", "null"};
  return markers;
}

std::string format_real(double value) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, value);
  if (ec != std::errc{}) throw std::runtime_error("format_real: conversion failed");
  return std::string(buf, ptr);
}

CsvTable parse_csv(std::istream& in) {
  CsvTable table;
  std::vector<std::string> record;
  std::string field;
  bool in_quotes = false;
  bool at_line_start = true;
  bool header_done = false;
  bool pending = false;  // a record has started
  auto finish_record = [&] {
    record.push_back(std::move(field));
    field.clear();
    if (!header_done) {
      table.header = std::move(record);
      for (auto& h : table.header) h = std::string(trim(h));
      header_done = true;
    } else if (!(record.size() == 1 && trim(record[0]).empty())) {
      table.rows.push_back(std::move(record));
    }
    record.clear();
    pending = false;
  };
  std::string line;
  char c = 0;
  while (in.get(c)) {
    if (at_line_start && !header_done && c == '#' && !in_quotes) {
      std::getline(in, line);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      table.comments.push_back(line);
      continue;
    }
    at_line_start = false;
    pending = true;
    if (in_quotes) {
      if (c == '"') {
        if (in.peek() == '"') {
          in.get(c);
          field.push_back('"');
        } else {
          in_quotes = false;
        }
      } else {
        field.push_back(c);
      }
      continue;
    }
    if (c == '"') {
      in_quotes = true;
    } else if (c == ',') {
      record.push_back(std::move(field));
      field.clear();
    } else if (c == '\n') {
      if (!field.empty() && field.back() == '\r') field.pop_back();
      finish_record();
      at_line_start = true;
    } else {
      field.push_back(c);
    }
  }
  if (in_quotes) throw std::runtime_error("CSV: unterminated quoted field");
  if (pending) finish_record();
  if (!header_done) throw std::runtime_error("CSV: missing header row");
  return table;
}

CsvTable read_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io(path, "cannot open for reading");
  try {
    return parse_csv(in);
  } catch (const std::exception& e) {
    fail_io(path, e.what());
  }
  return {};
}

bool looks_categorical(const std::vector<std::string>& cells,
                       const std::set<std::string>& missing_markers) {
  std::set<std::string> distinct;
  std::size_t present = 0;
  for (const auto& cell : cells) {
    if (is_missing_cell(cell, missing_markers)) continue;
    ++present;
    if (!parse_number(cell)) return true;
    distinct.insert(std::string(trim(cell)));
  }
  if (present == 0) return false;
  const double threshold = std::max(20.0, 0.05 * static_cast<double>(cells.size()));
  return static_cast<double>(distinct.size()) <= threshold;
}

Dataset apply_schema(const CsvTable& table, const Schema& schema, bool require_target) {
  const std::size_t n = table.rows.size();
  const std::size_t cols = schema.features.size();
  Dataset d;
  d.task = schema.task;
  d.categorical.resize(cols);
  std::vector<Real> x(n * cols, 0);
  std::vector<std::uint8_t> missing(n * cols, 0);
  bool any_missing = false;
  for (std::size_t j = 0; j < cols; ++j) {
    ColumnSchema col = schema.features[j];
    const auto index = find_column(table, col.name);
    if (!index) throw std::runtime_error(fmt::format("CSV: missing column '{}'", col.name));
    const auto cells = column_cells(table, *index);
    d.categorical[j] = col.kind == ColumnKind::kCategorical;
    if (col.kind == ColumnKind::kCategorical) {
      const auto codes = encode_categories(cells, col, schema.missing_markers, false);
      for (std::size_t i = 0; i < n; ++i) {
        if (codes[i]) {
          x[i * cols + j] = static_cast<Real>(*codes[i]);
        } else {
          missing[i * cols + j] = 1;
          any_missing = true;
        }
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        const auto v = is_missing_cell(cells[i], schema.missing_markers) ? std::nullopt
                                                                         : parse_number(cells[i]);
        if (v) {
          x[i * cols + j] = static_cast<Real>(*v);
        } else {
          missing[i * cols + j] = 1;
          any_missing = true;
        }
      }
    }
  }
  d.x = Tensor({n, cols}, std::move(x));
  if (any_missing) d.missing = std::move(missing);

  std::vector<Real> y(n, 0);
  const auto target_index = find_column(table, schema.target.name);
  if (!target_index && require_target) {
    throw std::runtime_error(fmt::format("CSV: target column '{}' not found", schema.target.name));
  }
  if (schema.task == TaskKind::kClassification) {
    d.num_classes = std::max<std::size_t>(2, schema.target.categories.size());
    d.labels.assign(n, -1);
    if (target_index) {
      ColumnSchema target = schema.target;
      const auto codes =
          encode_categories(column_cells(table, *target_index), target, schema.missing_markers,
                            false);
      for (std::size_t i = 0; i < n; ++i) {
        if (codes[i]) d.labels[i] = static_cast<int>(*codes[i]);
      }
    }
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<Real>(d.labels[i]);
  } else {
    std::fill(y.begin(), y.end(), std::numeric_limits<Real>::quiet_NaN());
    if (target_index) {
      const auto cells = column_cells(table, *target_index);
      for (std::size_t i = 0; i < n; ++i) {
        if (const auto v = parse_number(cells[i])) y[i] = static_cast<Real>(*v);
      }
    }
  }
  d.y = Tensor::vector(std::move(y));
  return d;
}

Ingested ingest_table(const CsvTable& table, const IngestOptions& options) {
  for (const auto& comment : table.comments) {
    if (comment.rfind(kCsvTag, 0) == 0) {
      return decode_annotated(table, nlohmann::json::parse(comment.substr(kCsvTag.size())));
    }
  }
  const auto target_index = find_column(table, options.target);
  if (!target_index && options.require_target) {
    throw std::runtime_error(fmt::format("CSV: target column '{}' not found", options.target));
  }
  const std::size_t n = table.rows.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (table.rows[i].size() != table.header.size()) {
      throw std::runtime_error(fmt::format("CSV: row {} has {} fields, header has {}", i + 1,
                                           table.rows[i].size(), table.header.size()));
    }
  }

  Schema schema;
  schema.missing_markers = options.missing_markers;
  for (std::size_t c = 0; c < table.header.size(); ++c) {
    if (target_index && c == *target_index) continue;
    const auto cells = column_cells(table, c);
    ColumnSchema col;
    col.name = table.header[c];
    const auto override_it = options.overrides.find(col.name);
    if (override_it != options.overrides.end() && override_it->second != ColumnKind::kTarget) {
      col.kind = override_it->second;
    } else {
      col.kind = looks_categorical(cells, options.missing_markers) ? ColumnKind::kCategorical
                                                                   : ColumnKind::kNumeric;
    }
    std::size_t observed = 0;
    for (const auto& cell : cells) {
      if (is_missing_cell(cell, options.missing_markers)) {
        ++col.missing;
      } else if (col.kind == ColumnKind::kNumeric && !parse_number(cell)) {
        ++col.unparseable;
      } else {
        ++observed;
      }
    }
    if (observed == 0 && n > 0) {
      schema.dropped.push_back(col.name);
      continue;
    }
    if (col.kind == ColumnKind::kCategorical) {
      encode_categories(cells, col, options.missing_markers, true);
    }
    schema.features.push_back(std::move(col));
  }
  if (schema.features.empty()) throw std::runtime_error("CSV: no usable feature columns");

  schema.target.name = options.target;
  schema.target.kind = ColumnKind::kTarget;
  if (target_index) {
    const auto cells = column_cells(table, *target_index);
    schema.task = options.task.value_or(looks_categorical(cells, options.missing_markers)
                                            ? TaskKind::kClassification
                                            : TaskKind::kRegression);
    for (const auto& cell : cells) {
      if (is_missing_cell(cell, options.missing_markers)) ++schema.target.missing;
    }
    if (schema.task == TaskKind::kClassification) {
      encode_categories(cells, schema.target, options.missing_markers, true);
    }
  } else {
    schema.task = options.task.value_or(TaskKind::kClassification);
  }

  Ingested out;
  out.data = apply_schema(table, schema, options.require_target);
  out.schema = std::move(schema);
  return out;
}

Ingested ingest_csv(const std::filesystem::path& path, const IngestOptions& options) {
  const CsvTable table = read_csv(path);
  try {
    return ingest_table(table, options);
  } catch (const std::exception& e) {
    fail_io(path, e.what());
  }
  return {};
}

void write_dataset_csv(const Dataset& d, std::ostream& out) {
  const std::size_t n = d.rows();
  const std::size_t cols = d.cols();
  nlohmann::json meta{{"task", std::string(to_string(d.task))},
                      {"num_classes", d.num_classes},
                      {"categorical", d.categorical}};
  out << '#' << kCsvTag << meta.dump() << '\n';
  for (std::size_t j = 0; j < cols; ++j) out << 'x' << j << ',';
  out << "y\n";
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      if (!d.is_missing(i, j)) out << format_real(d.value(i, j));
      out << ',';
    }
    if (d.task == TaskKind::kClassification) {
      if (d.labels[i] >= 0) out << d.labels[i];
    } else if (std::isfinite(d.y[i])) {
      out << format_real(d.y[i]);
    }
    out << '\n';
  }
}

void write_dataset_csv(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io(path, "cannot open for writing");
  write_dataset_csv(d, out);
  if (!out) fail_io(path, "write failed");
}

void write_dataset_binary(const Dataset& d, const std::filesystem::path& path) {
  d.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail_io(path, "cannot open for writing");
  const std::size_t n = d.rows();
  const std::size_t cols = d.cols();
  const nlohmann::json meta{{"task", std::string(to_string(d.task))},
                            {"rows", n},
                            {"cols", cols},
                            {"num_classes", d.num_classes},
                            {"categorical", d.categorical},
                            {"has_missing", !d.missing.empty()}};
  const std::string header = meta.dump();
  const auto header_size = static_cast<std::uint64_t>(header.size());
  out.write(kBinaryMagic, sizeof kBinaryMagic);
  out.write(reinterpret_cast<const char*>(&kBinaryVersion), sizeof kBinaryVersion);
  out.write(reinterpret_cast<const char*>(&header_size), sizeof header_size);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  std::vector<double> column(n);
  for (std::size_t j = 0; j < cols; ++j) {
    for (std::size_t i = 0; i < n; ++i) column[i] = static_cast<double>(d.value(i, j));
    out.write(reinterpret_cast<const char*>(column.data()),
              static_cast<std::streamsize>(n * sizeof(double)));
  }
  for (std::size_t i = 0; i < n; ++i) column[i] = static_cast<double>(d.y[i]);
  out.write(reinterpret_cast<const char*>(column.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  if (d.task == TaskKind::kClassification) {
    std::vector<std::int32_t> labels(d.labels.begin(), d.labels.end());
    out.write(reinterpret_cast<const char*>(labels.data()),
              static_cast<std::streamsize>(n * sizeof(std::int32_t)));
  }
  if (!d.missing.empty()) {
    std::vector<char> mask(n);
    for (std::size_t j = 0; j < cols; ++j) {
      for (std::size_t i = 0; i < n; ++i) mask[i] = static_cast<char>(d.is_missing(i, j));
      out.write(mask.data(), static_cast<std::streamsize>(n));
    }
  }
  if (!out) fail_io(path, "write failed");
}

Dataset read_dataset_binary(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail_io(path, "cannot open for reading");
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t header_size = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&header_size), sizeof header_size);
  if (!in || std::memcmp(magic, kBinaryMagic, sizeof magic) != 0) fail_io(path, "not a dataset file");
  if (version != kBinaryVersion) fail_io(path, fmt::format("unsupported version {}", version));
  std::string header(header_size, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_size));
  const auto meta = nlohmann::json::parse(header);
  Dataset d;
  d.task = parse_task_kind(meta.at("task").get<std::string>());
  d.num_classes = meta.at("num_classes").get<std::size_t>();
  d.categorical = meta.at("categorical").get<std::vector<std::uint8_t>>();
  const auto n = meta.at("rows").get<std::size_t>();
  const auto cols = meta.at("cols").get<std::size_t>();
  std::vector<double> column(n);
  std::vector<Real> x(n * cols);
  auto read_column = [&] {
    in.read(reinterpret_cast<char*>(column.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
  };
  for (std::size_t j = 0; j < cols; ++j) {
    read_column();
    for (std::size_t i = 0; i < n; ++i) x[i * cols + j] = static_cast<Real>(column[i]);
  }
  read_column();
  d.y = Tensor::vector(std::vector<Real>(column.begin(), column.end()));
  d.x = Tensor({n, cols}, std::move(x));
  if (d.task == TaskKind::kClassification) {
    std::vector<std::int32_t> labels(n);
    in.read(reinterpret_cast<char*>(labels.data()),
            static_cast<std::streamsize>(n * sizeof(std::int32_t)));
    d.labels.assign(labels.begin(), labels.end());
  }
  if (meta.at("has_missing").get<bool>()) {
    d.missing.assign(n * cols, 0);
    std::vector<char> mask(n);
    for (std::size_t j = 0; j < cols; ++j) {
      in.read(mask.data(), static_cast<std::streamsize>(n));
      for (std::size_t i = 0; i < n; ++i) d.missing[i * cols + j] = static_cast<std::uint8_t>(mask[i]);
    }
  }
  if (!in) fail_io(path, "truncated dataset file");
  d.validate();
  return d;
}

}  // namespace aptab
