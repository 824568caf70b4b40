#include "bsr/synthdata/dataset_io.hpp"

#include <json.hpp>
#include <mutex>

#include "bsr/binary_io.hpp"
#include "bsr/errors.hpp"

namespace bsr::synthdata {
namespace {

std::mutex audit_mutex;
std::vector<std::string> audit_log;

std::vector<char> audited_read(const std::filesystem::path& path) {
  {
    std::lock_guard lock(audit_mutex);
    audit_log.push_back(path.string());
  }
  return binio::read_file(path);
}

std::filesystem::path sample_path(const std::filesystem::path& dir, std::uint32_t id, const char* ext) {
  return dir / (std::to_string(id) + ext);
}

void read_raster_header(binio::Reader& r, const char (&magic)[5], std::size_t& h, std::size_t& w) {
  r.expect_magic(magic);
  const auto version = r.get<std::uint32_t>();
  if (version != kRasterVersion) {
    throw IoError(r.file(), "unsupported format version " + std::to_string(version) + " (expected " +
                                std::to_string(kRasterVersion) + ")");
  }
  h = r.get<std::uint32_t>();
  w = r.get<std::uint32_t>();
}

std::vector<std::uint32_t> id_list(const nlohmann::json& ids, const char* key, const std::string& file) {
  if (!ids.contains(key) || !ids[key].is_array()) throw IoError(file, std::string("manifest lacks ids.") + key);
  return ids[key].get<std::vector<std::uint32_t>>();
}

struct Manifest {
  std::size_t h = 0, w = 0, k = 0;
  std::vector<std::uint32_t> labeled, unlabeled, test;
};

Manifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  const std::vector<char> bytes = audited_read(path);
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(bytes.begin(), bytes.end());
    const auto version = j.at("version").get<std::uint32_t>();
    if (version != kManifestVersion) {
      throw IoError(path.string(), "unsupported manifest version " + std::to_string(version) + " (expected " +
                                       std::to_string(kManifestVersion) + ")");
    }
    m.h = j.at("h").get<std::size_t>();
    m.w = j.at("w").get<std::size_t>();
    m.k = j.at("k").get<std::size_t>();
    const auto& ids = j.at("ids");
    m.labeled = id_list(ids, "labeled", path.string());
    m.unlabeled = id_list(ids, "unlabeled", path.string());
    m.test = id_list(ids, "test", path.string());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string(), std::string("malformed manifest: ") + e.what());
  }
  return m;
}

void check_dims(const std::filesystem::path& path, std::size_t h, std::size_t w, const Manifest& m) {
  if (h != m.h || w != m.w) {
    throw IoError(path.string(), "raster is " + std::to_string(h) + "x" + std::to_string(w) + " but manifest says " +
                                     std::to_string(m.h) + "x" + std::to_string(m.w));
  }
}

LabeledSample load_labeled(const std::filesystem::path& dir, std::uint32_t id, const Manifest& m) {
  LabeledSample s{id, load_image(sample_path(dir, id, ".img")), load_labels(sample_path(dir, id, ".lab"))};
  check_dims(sample_path(dir, id, ".img"), s.image.dim(1), s.image.dim(2), m);
  check_dims(sample_path(dir, id, ".lab"), s.labels.height, s.labels.width, m);
  return s;
}

}  // namespace

void save_image(const std::filesystem::path& path, const Tensor& image) {
  require_chw(image, "save_image");
  if (image.dim(0) != 1) throw ShapeError("save_image: expected a single-channel image");
  binio::Writer w;
  w.put_magic("BSRI");
  w.put<std::uint32_t>(kRasterVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(image.dim(1)));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(image.dim(2)));
  w.put_doubles(image.storage());
  binio::write_file_atomic(path, w.bytes());
}

Tensor load_image(const std::filesystem::path& path) {
  binio::Reader r(path.string(), audited_read(path));
  std::size_t h = 0, w = 0;
  read_raster_header(r, "BSRI", h, w);
  if (r.remaining() != h * w * sizeof(double)) {
    throw IoError(path.string(), r.remaining() < h * w * sizeof(double) ? "truncated raster" : "trailing bytes");
  }
  return Tensor({1, h, w}, r.get_doubles(h * w));
}

void save_labels(const std::filesystem::path& path, const LabelMap& labels) {
  binio::Writer w;
  w.put_magic("BSRL");
  w.put<std::uint32_t>(kRasterVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(labels.height));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(labels.width));
  for (std::uint16_t l : labels.labels) w.put(l);
  binio::write_file_atomic(path, w.bytes());
}

LabelMap load_labels(const std::filesystem::path& path) {
  binio::Reader r(path.string(), audited_read(path));
  std::size_t h = 0, w = 0;
  read_raster_header(r, "BSRL", h, w);
  if (r.remaining() != h * w * sizeof(std::uint16_t)) {
    throw IoError(path.string(), r.remaining() < h * w * sizeof(std::uint16_t) ? "truncated raster" : "trailing bytes");
  }
  LabelMap m(h, w);
  for (auto& l : m.labels) l = r.get<std::uint16_t>();
  return m;
}

void save_dataset(const std::filesystem::path& dir, const GeneratedDataset& data) {
  std::filesystem::create_directories(dir);
  const DatasetSplit& s = data.split;
  nlohmann::json ids{{"labeled", nlohmann::json::array()}, {"unlabeled", nlohmann::json::array()},
                     {"test", nlohmann::json::array()}};
  for (const auto& x : s.labeled) {
    ids["labeled"].push_back(x.id);
    save_image(sample_path(dir, x.id, ".img"), x.image);
    save_labels(sample_path(dir, x.id, ".lab"), x.labels);
  }
  for (const auto& x : s.unlabeled) {
    ids["unlabeled"].push_back(x.id);
    save_image(sample_path(dir, x.id, ".img"), x.image);
    auto it = data.oracle.labels.find(x.id);
    if (it != data.oracle.labels.end()) save_labels(sample_path(dir, x.id, ".lab.oracle"), it->second);
  }
  for (const auto& x : s.test) {
    ids["test"].push_back(x.id);
    save_image(sample_path(dir, x.id, ".img"), x.image);
    save_labels(sample_path(dir, x.id, ".lab"), x.labels);
  }
  const nlohmann::json manifest{{"version", kManifestVersion}, {"h", s.height}, {"w", s.width},
                                {"k", s.num_classes}, {"ids", ids}};
  binio::write_text_atomic(dir / "manifest.json", manifest.dump(1) + "\n");
}

DatasetSplit load_split(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir);
  DatasetSplit s;
  s.height = m.h;
  s.width = m.w;
  s.num_classes = m.k;
  for (auto id : m.labeled) s.labeled.push_back(load_labeled(dir, id, m));
  for (auto id : m.unlabeled) {
    UnlabeledSample u{id, load_image(sample_path(dir, id, ".img"))};
    check_dims(sample_path(dir, id, ".img"), u.image.dim(1), u.image.dim(2), m);
    s.unlabeled.push_back(std::move(u));
  }
  for (auto id : m.test) s.test.push_back(load_labeled(dir, id, m));
  return s;
}

OracleLabels load_oracle(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir);
  OracleLabels o;
  for (auto id : m.unlabeled) o.labels.emplace(id, load_labels(sample_path(dir, id, ".lab.oracle")));
  return o;
}

namespace io_audit {

void clear() {
  std::lock_guard lock(audit_mutex);
  audit_log.clear();
}

std::vector<std::string> opened() {
  std::lock_guard lock(audit_mutex);
  return audit_log;
}

}  // namespace io_audit

}  // namespace bsr::synthdata
