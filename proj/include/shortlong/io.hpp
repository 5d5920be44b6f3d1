#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include <json.hpp>

#include "shortlong/core.hpp"

namespace shortlong {

using Json = nlohmann::json;

/// "%.17g": enough digits to round-trip any double.
std::string format_double(double x);

Json to_json(const PolicyRecord& record, int horizon, const std::string& env_id);
PolicyRecord record_from_json(const Json& j);

/// JSON-lines, one PolicyRecord per line:
/// {policy_id, horizon, env_id, true_value?, rollouts:[{states, actions, rewards}]}
void write_jsonl(std::ostream& out, const PolicyDataset& data);
void write_jsonl(const std::filesystem::path& path, const PolicyDataset& data);
PolicyDataset read_jsonl(std::istream& in);
PolicyDataset read_jsonl(const std::filesystem::path& path);

Json read_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const Json& j);

/// Minimal CSV reader: header row plus numeric or string cells, comma separated.
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    /// Column index for `name`, or -1.
    int column(const std::string& name) const;
};

CsvTable read_csv(std::istream& in);
CsvTable read_csv(const std::filesystem::path& path);

}  // namespace shortlong
