#pragma once

#include <array>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

namespace synthcount::manifest {

using json = nlohmann::json;

// Paths inside rows are relative to the directory holding the manifest file.
struct SortingRow {
    std::string triplet_id;
    std::array<std::string, 3> paths;
    std::array<int, 3> ranks{0, 1, 2};
    // Oracle-only audit trail of the three true counts.
    std::optional<std::array<int, 3>> true_counts;
};

struct CountRow {
    std::string path;
    int prompt_count = 0;
    std::optional<int> true_count;
    bool kept = true;
};

struct DensityRow {
    std::string path;
    int density_label = 0;
    std::optional<int> true_count;
};

json to_json(const SortingRow& row);
json to_json(const CountRow& row);
json to_json(const DensityRow& row);

// Throw ConfigError naming the offending field.
SortingRow sorting_row(const json& j);
CountRow count_row(const json& j);
DensityRow density_row(const json& j);

std::vector<json> read_jsonl(const std::filesystem::path& path);
std::vector<SortingRow> read_sorting(const std::filesystem::path& path);
std::vector<CountRow> read_count(const std::filesystem::path& path);
std::vector<DensityRow> read_density(const std::filesystem::path& path);

// Append-only line writer. Lines go to "<path>.partial" and the file is renamed into
// place by commit(), so a finished manifest is never observed half-written.
class Writer {
public:
    explicit Writer(std::filesystem::path path);
    Writer(const Writer&) = delete;
    Writer& operator=(const Writer&) = delete;
    ~Writer();

    void append(const json& record);
    void commit();
    std::size_t size() const { return lines_; }

private:
    std::filesystem::path path_;
    std::filesystem::path partial_;
    std::ofstream out_;
    std::size_t lines_ = 0;
    bool committed_ = false;
};

template <class Row>
void write_rows(const std::filesystem::path& path, const std::vector<Row>& rows) {
    Writer writer(path);
    for (const auto& row : rows) writer.append(to_json(row));
    writer.commit();
}

// Resolves a row path against the manifest's directory.
std::filesystem::path resolve(const std::filesystem::path& manifest_path, const std::string& row_path);

// Root for relative data paths: $SYNTHCOUNT_DATA when set, else the working directory.
std::filesystem::path data_root();

}  // namespace synthcount::manifest
