#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "bsr/gradcore/tensor.hpp"
#include "bsr/label_map.hpp"
#include "bsr/synthdata/scene.hpp"

// On-disk dataset layout:
//   manifest.json        {"version":1,"h":..,"w":..,"k":..,"ids":{"labeled":[..],"unlabeled":[..],"test":[..]}}
//   <id>.img             "BSRI", u32 version, u32 h, u32 w, f64 raster
//   <id>.lab             "BSRL", u32 version, u32 h, u32 w, u16 raster
//   <id>.lab.oracle      hidden labels of unlabeled samples, same format as .lab
namespace bsr::synthdata {

inline constexpr std::uint32_t kManifestVersion = 1;
inline constexpr std::uint32_t kRasterVersion = 1;

void save_image(const std::filesystem::path& path, const Tensor& image);
Tensor load_image(const std::filesystem::path& path);
void save_labels(const std::filesystem::path& path, const LabelMap& labels);
LabelMap load_labels(const std::filesystem::path& path);

void save_dataset(const std::filesystem::path& dir, const GeneratedDataset& data);

// Reads the training view. Never opens *.lab.oracle files.
DatasetSplit load_split(const std::filesystem::path& dir);
OracleLabels load_oracle(const std::filesystem::path& dir);

// Every file opened by the readers above is recorded here so tests can
// assert which files a pipeline touched.
namespace io_audit {
void clear();
std::vector<std::string> opened();
}  // namespace io_audit

}  // namespace bsr::synthdata
