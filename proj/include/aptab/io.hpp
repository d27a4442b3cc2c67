#pragma once

// Dataset ingestion and export: CSV with schema inference, an annotated CSV
// form that round-trips a Dataset exactly, and a columnar binary file.

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "aptab/prior.hpp"

namespace aptab {

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  // Leading lines starting with '#', without the marker.
  std::vector<std::string> comments;
};

// RFC 4180 style: quoted fields may contain commas, newlines and doubled quotes.
CsvTable parse_csv(std::istream& in);
CsvTable read_csv(const std::filesystem::path& path);

enum class ColumnKind { kNumeric, kCategorical, kTarget };

struct ColumnSchema {
  std::string name;
  ColumnKind kind = ColumnKind::kNumeric;
  std::vector<std::string> categories;  // code k <-> categories[k]
  std::size_t missing = 0;
  std::size_t unparseable = 0;  // numeric columns: cells treated as missing
};

const std::set<std::string>& default_missing_markers();

struct IngestOptions {
  std::string target;
  std::optional<TaskKind> task;  // inferred from the target column when absent
  std::map<std::string, ColumnKind> overrides;
  std::set<std::string> missing_markers = default_missing_markers();
  // When false, an absent target column yields unknown labels.
  bool require_target = true;
};

struct Schema {
  std::vector<ColumnSchema> features;  // kept columns, in file order
  ColumnSchema target;
  TaskKind task = TaskKind::kClassification;
  std::vector<std::string> dropped;  // all-missing columns
  std::set<std::string> missing_markers = default_missing_markers();
};

struct Ingested {
  Dataset data;  // raw (unnormalized) values; missing cells hold 0
  Schema schema;
};

// Ingests a table. Files written by write_dataset_csv are recognized by
// their header comment and decoded without re-inferring the schema.
Ingested ingest_table(const CsvTable& table, const IngestOptions& options);
Ingested ingest_csv(const std::filesystem::path& path, const IngestOptions& options);

// Encodes a table with an existing schema (for example a test file against
// the training file's dictionaries). Unseen categories become missing.
Dataset apply_schema(const CsvTable& table, const Schema& schema, bool require_target);

// Categorical when any cell is non-numeric or the distinct count is at most
// max(20, 5% of rows).
bool looks_categorical(const std::vector<std::string>& cells,
                       const std::set<std::string>& missing_markers);

void write_dataset_csv(const Dataset& d, std::ostream& out);
void write_dataset_csv(const Dataset& d, const std::filesystem::path& path);

void write_dataset_binary(const Dataset& d, const std::filesystem::path& path);
Dataset read_dataset_binary(const std::filesystem::path& path);

// Shortest representation that parses back to the same value.
std::string format_real(double value);

}  // namespace aptab
