#include "shortlong/io.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace shortlong {

std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

Json to_json(const PolicyRecord& record, int horizon, const std::string& env_id) {
    Json j;
    j["policy_id"] = record.policy_id;
    j["horizon"] = horizon;
    j["env_id"] = env_id;
    if (record.true_value) j["true_value"] = *record.true_value;
    Json rollouts = Json::array();
    for (const auto& t : record.trajectories) {
        Json states = Json::array();
        for (const auto& s : t.states) states.push_back(s.values);
        Json actions = Json::array();
        for (const auto& a : t.actions) actions.push_back(a.vector);
        rollouts.push_back({{"states", states}, {"actions", actions}, {"rewards", t.rewards}});
    }
    j["rollouts"] = std::move(rollouts);
    return j;
}

PolicyRecord record_from_json(const Json& j) {
    PolicyRecord rec;
    rec.policy_id = j.at("policy_id").get<std::string>();
    if (j.contains("true_value") && !j["true_value"].is_null())
        rec.true_value = j["true_value"].get<double>();
    for (const auto& r : j.at("rollouts")) {
        Trajectory t;
        for (const auto& s : r.at("states")) t.states.emplace_back(s.get<std::vector<double>>());
        for (const auto& a : r.at("actions")) t.actions.push_back({-1, a.get<std::vector<double>>()});
        t.rewards = r.at("rewards").get<std::vector<double>>();
        if (t.states.size() != t.actions.size() + 1 || t.rewards.size() != t.states.size())
            throw Error("record_from_json: inconsistent rollout lengths for policy " + rec.policy_id);
        rec.trajectories.push_back(std::move(t));
    }
    return rec;
}

void write_jsonl(std::ostream& out, const PolicyDataset& data) {
    for (const auto& r : data.records) out << to_json(r, data.horizon, data.env_id).dump() << '\n';
}

void write_jsonl(const std::filesystem::path& path, const PolicyDataset& data) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    write_jsonl(out, data);
}

PolicyDataset read_jsonl(std::istream& in) {
    PolicyDataset data;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const Json j = Json::parse(line);
        if (first) {
            data.horizon = j.at("horizon").get<int>();
            data.env_id = j.at("env_id").get<std::string>();
            first = false;
        }
        data.records.push_back(record_from_json(j));
    }
    return data;
}

PolicyDataset read_jsonl(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    return read_jsonl(in);
}

Json read_json_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    return Json::parse(in);
}

void write_json_file(const std::filesystem::path& path, const Json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

int CsvTable::column(const std::string& name) const {
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == name) return static_cast<int>(i);
    return -1;
}

namespace {
std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
        while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
        std::size_t b = 0;
        while (b < cell.size() && cell[b] == ' ') ++b;
        cells.push_back(cell.substr(b));
    }
    return cells;
}
}  // namespace

CsvTable read_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw Error("read_csv: empty input");
    t.header = split_line(line);
    while (std::getline(in, line)) {
        if (line.empty() || line == "\r") continue;
        auto cells = split_line(line);
        if (cells.size() != t.header.size())
            throw Error("read_csv: row has " + std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(t.header.size()));
        t.rows.push_back(std::move(cells));
    }
    return t;
}

CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path.string());
    return read_csv(in);
}

}  // namespace shortlong
