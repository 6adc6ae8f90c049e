#include "synthcount/manifest.hpp"

#include <cstdlib>

#include "synthcount/errors.hpp"

namespace synthcount::manifest {

namespace fs = std::filesystem;

json to_json(const SortingRow& row) {
    json j = {{"triplet_id", row.triplet_id}, {"paths", row.paths}, {"ranks", row.ranks}};
    if (row.true_counts) j["true_counts"] = *row.true_counts;
    return j;
}

json to_json(const CountRow& row) {
    json j = {{"path", row.path}, {"prompt_count", row.prompt_count}};
    if (row.true_count) j["true_count"] = *row.true_count;
    j["kept"] = row.kept;
    return j;
}

json to_json(const DensityRow& row) {
    json j = {{"path", row.path}, {"density_label", row.density_label}};
    if (row.true_count) j["true_count"] = *row.true_count;
    return j;
}

namespace {

template <class T>
T field(const json& j, const char* name) {
    if (!j.contains(name)) throw Error(ErrorCode::ConfigError, std::string("missing field '") + name + "'");
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        throw Error(ErrorCode::ConfigError, std::string("field '") + name + "' has the wrong type");
    }
}

template <class T>
std::optional<T> optional_field(const json& j, const char* name) {
    if (!j.contains(name) || j.at(name).is_null()) return std::nullopt;
    return field<T>(j, name);
}

}  // namespace

SortingRow sorting_row(const json& j) {
    SortingRow row;
    row.triplet_id = field<std::string>(j, "triplet_id");
    row.paths = field<std::array<std::string, 3>>(j, "paths");
    row.ranks = field<std::array<int, 3>>(j, "ranks");
    row.true_counts = optional_field<std::array<int, 3>>(j, "true_counts");
    auto sorted = row.ranks;
    std::sort(sorted.begin(), sorted.end());
    if (sorted != std::array<int, 3>{0, 1, 2}) {
        throw Error(ErrorCode::ConfigError, "triplet " + row.triplet_id + " ranks are not {0,1,2}");
    }
    return row;
}

CountRow count_row(const json& j) {
    CountRow row;
    row.path = field<std::string>(j, "path");
    row.prompt_count = field<int>(j, "prompt_count");
    row.true_count = optional_field<int>(j, "true_count");
    row.kept = j.contains("kept") ? field<bool>(j, "kept") : true;
    if (row.prompt_count < 0) throw Error(ErrorCode::ConfigError, "negative prompt_count for " + row.path);
    return row;
}

DensityRow density_row(const json& j) {
    DensityRow row;
    row.path = field<std::string>(j, "path");
    row.density_label = field<int>(j, "density_label");
    row.true_count = optional_field<int>(j, "true_count");
    if (row.density_label < 0 || row.density_label > 2) {
        throw Error(ErrorCode::ConfigError, "density_label out of range for " + row.path);
    }
    return row;
}

std::vector<json> read_jsonl(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::IoError, "cannot read manifest " + path.string());
    std::vector<json> out;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(json::parse(line));
        } catch (const json::exception& e) {
            throw Error(ErrorCode::ConfigError,
                        path.string() + ":" + std::to_string(number) + ": " + e.what());
        }
    }
    return out;
}

namespace {

template <class Row, class Parse>
std::vector<Row> read_rows(const fs::path& path, Parse parse) {
    std::vector<Row> rows;
    int number = 0;
    for (const auto& j : read_jsonl(path)) {
        ++number;
        try {
            rows.push_back(parse(j));
        } catch (const Error& e) {
            throw Error(e.code(), path.string() + ": record " + std::to_string(number) + ": " + e.message());
        }
    }
    return rows;
}

}  // namespace

std::vector<SortingRow> read_sorting(const fs::path& path) {
    return read_rows<SortingRow>(path, sorting_row);
}

std::vector<CountRow> read_count(const fs::path& path) { return read_rows<CountRow>(path, count_row); }

std::vector<DensityRow> read_density(const fs::path& path) {
    return read_rows<DensityRow>(path, density_row);
}

Writer::Writer(fs::path path) : path_(std::move(path)) {
    partial_ = path_;
    partial_ += ".partial";
    if (path_.has_parent_path()) fs::create_directories(path_.parent_path());
    out_.open(partial_, std::ios::trunc);
    if (!out_) throw Error(ErrorCode::IoError, "cannot write " + partial_.string());
}

Writer::~Writer() {
    if (!committed_) {
        out_.close();
        std::error_code ec;
        fs::remove(partial_, ec);
    }
}

void Writer::append(const json& record) {
    if (committed_) throw Error(ErrorCode::IoError, "manifest " + path_.string() + " is already committed");
    out_ << record.dump() << '\n';
    out_.flush();
    if (!out_) throw Error(ErrorCode::IoError, "short write to " + partial_.string());
    ++lines_;
}

void Writer::commit() {
    if (committed_) return;
    out_.close();
    if (!out_) throw Error(ErrorCode::IoError, "cannot finish " + partial_.string());
    fs::rename(partial_, path_);
    committed_ = true;
}

fs::path resolve(const fs::path& manifest_path, const std::string& row_path) {
    const fs::path p(row_path);
    if (p.is_absolute()) return p;
    return manifest_path.parent_path() / p;
}

fs::path data_root() {
    if (const char* root = std::getenv("SYNTHCOUNT_DATA"); root && *root) return fs::path(root);
    return fs::current_path();
}

}  // namespace synthcount::manifest
