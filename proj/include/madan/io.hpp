#pragma once

// On-disk dataset format.
//
//   <root>/manifest.json
//   <root>/<domain>/images/NNNNNN.png     8-bit gray or RGB
//   <root>/<domain>/labels/NNNNNN.png     8-bit index raster (segmentation)
//   <root>/<domain>/labels.csv            filename,class       (classification)
//
// Pixel values map to [-1, 1] by v -> 2v/255 - 1.

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "madan/data.hpp"
#include "madan/error.hpp"

namespace madan {

namespace fs = std::filesystem;
using json = nlohmann::json;

inline std::uint8_t quantize(float v) {
  const double q = std::round((static_cast<double>(v) + 1.0) * 127.5);
  return static_cast<std::uint8_t>(std::clamp(q, 0.0, 255.0));
}

inline float dequantize(std::uint8_t v) { return static_cast<float>(2.0 * v / 255.0 - 1.0); }

/// Raw 8-bit raster, interleaved channels.
struct Raster {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;
};

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

inline void write_png(const fs::path& path, const Raster& r) {
  require(r.channels == 1 || r.channels == 3, ErrorKind::io, "png: channels must be 1 or 3");
  detail::FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  require(fp != nullptr, ErrorKind::io, "cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorKind::io, "png write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(r.width), static_cast<png_uint_32>(r.height), 8,
               r.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const std::size_t stride = static_cast<std::size_t>(r.width) * r.channels;
  for (int y = 0; y < r.height; ++y)
    png_write_row(png, const_cast<png_bytep>(r.data.data() + y * stride));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Decodes any 8-bit PNG; palette and alpha are expanded/stripped.
inline Raster read_png(const fs::path& path) {
  detail::FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  require(fp != nullptr, ErrorKind::load, "missing file " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorKind::load, "png decode failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  Raster r;
  r.width = static_cast<int>(png_get_image_width(png, info));
  r.height = static_cast<int>(png_get_image_height(png, info));
  r.channels = static_cast<int>(png_get_channels(png, info));
  const std::size_t stride = png_get_rowbytes(png, info);
  r.data.resize(stride * static_cast<std::size_t>(r.height));
  std::vector<png_bytep> rows(static_cast<std::size_t>(r.height));
  for (int y = 0; y < r.height; ++y) rows[static_cast<std::size_t>(y)] = r.data.data() + y * stride;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return r;
}

inline Raster image_to_raster(const Image& im) {
  Raster r{im.height, im.width, im.channels, std::vector<std::uint8_t>(im.pixels.size())};
  std::transform(im.pixels.begin(), im.pixels.end(), r.data.begin(), quantize);
  return r;
}

inline Image raster_to_image(const Raster& r) {
  Image im(r.height, r.width, r.channels);
  std::transform(r.data.begin(), r.data.end(), im.pixels.begin(), dequantize);
  return im;
}

// ---------------------------------------------------------------------------
// Manifest

enum class DomainRole { source, target, test };

inline std::string to_string(DomainRole r) {
  switch (r) {
    case DomainRole::source: return "source";
    case DomainRole::target: return "target";
    case DomainRole::test: return "test";
  }
  return "?";
}

inline DomainRole domain_role_from_string(const std::string& s) {
  if (s == "source") return DomainRole::source;
  if (s == "target") return DomainRole::target;
  if (s == "test") return DomainRole::test;
  fail(ErrorKind::load, "unknown domain role '" + s + "'");
}

struct DomainRecord {
  std::string name;
  DomainRole role = DomainRole::source;
  TaskKind kind = TaskKind::classification;
  std::string image_dir;  // relative to root
  std::string labels;     // label directory or CSV, relative to root; empty for target
  int num_classes = 0;
};

struct DatasetManifest {
  fs::path root;
  std::vector<int> image_shape;  // H, W, C
  std::vector<DomainRecord> domains;

  const DomainRecord& find(const std::string& name) const {
    for (const auto& d : domains)
      if (d.name == name) return d;
    fail(ErrorKind::load, "domain '" + name + "' not in manifest");
  }
  std::vector<std::string> names_with_role(DomainRole role) const {
    std::vector<std::string> out;
    for (const auto& d : domains)
      if (d.role == role) out.push_back(d.name);
    return out;
  }
  int num_classes() const { return domains.empty() ? 0 : domains.front().num_classes; }
  TaskKind kind() const { return domains.empty() ? TaskKind::classification : domains.front().kind; }

  void validate() const {
    int targets = 0, sources = 0;
    for (const auto& d : domains) {
      targets += d.role == DomainRole::target;
      sources += d.role == DomainRole::source;
      require(d.num_classes == num_classes(), ErrorKind::load, d.name + ": class count differs across domains");
      require(d.kind == kind(), ErrorKind::load, d.name + ": task kind differs across domains");
      require(d.role == DomainRole::target || !d.labels.empty(), ErrorKind::load,
              d.name + ": labeled role without labels");
    }
    require(targets == 1, ErrorKind::load, "manifest must declare exactly one target domain");
    require(sources >= 2, ErrorKind::load, "manifest must declare at least 2 source domains");
    require(num_classes() >= 2, ErrorKind::load, "manifest class count must be >= 2");
    require(image_shape.size() == 3, ErrorKind::load, "manifest image_shape must be [H, W, C]");
  }
};

inline json to_json(const DatasetManifest& m) {
  json j;
  j["root"] = m.root.string();
  j["image_shape"] = m.image_shape;
  j["domains"] = json::array();
  for (const auto& d : m.domains)
    j["domains"].push_back({{"name", d.name},
                            {"role", to_string(d.role)},
                            {"kind", to_string(d.kind)},
                            {"images", d.image_dir},
                            {"labels", d.labels},
                            {"num_classes", d.num_classes}});
  return j;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  require(in.good(), ErrorKind::load, "missing file " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json(const fs::path& p, ErrorKind kind = ErrorKind::load) {
  const auto text = read_text(p);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(kind, p.string() + ": " + e.what());
  }
}

/// Writes via a temporary file and rename, so readers never see a partial file.
inline void write_text_atomic(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  const fs::path tmp = p.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorKind::io, "cannot write " + tmp.string());
    out << text;
    require(out.good(), ErrorKind::io, "short write " + tmp.string());
  }
  fs::rename(tmp, p);
}

/// `path` may be the manifest file or the directory that contains manifest.json.
inline DatasetManifest load_manifest(const fs::path& path) {
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  const json j = read_json(file);
  DatasetManifest m;
  try {
    const std::string root = j.value("root", ".");
    m.root = fs::path(root).is_absolute() ? fs::path(root) : file.parent_path() / root;
    m.image_shape = j.at("image_shape").get<std::vector<int>>();
    for (const auto& d : j.at("domains")) {
      DomainRecord r;
      r.name = d.at("name").get<std::string>();
      r.role = domain_role_from_string(d.at("role").get<std::string>());
      r.kind = task_kind_from_string(d.at("kind").get<std::string>());
      r.image_dir = d.at("images").get<std::string>();
      r.labels = d.value("labels", "");
      r.num_classes = d.at("num_classes").get<int>();
      m.domains.push_back(r);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::load, file.string() + ": " + e.what());
  }
  m.validate();
  return m;
}

inline std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  require(fs::is_directory(dir), ErrorKind::load, "missing directory " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

inline DomainBundle load_bundle(const DatasetManifest& m, const std::string& name) {
  const DomainRecord& rec = m.find(name);
  DomainBundle b;
  b.name = rec.name;
  b.kind = rec.kind;
  b.num_classes = rec.num_classes;
  const auto files = sorted_pngs(m.root / rec.image_dir);
  require(!files.empty(), ErrorKind::load, name + ": no images in " + (m.root / rec.image_dir).string());
  for (const auto& f : files) {
    const Raster r = read_png(f);
    require(r.height == m.image_shape[0] && r.width == m.image_shape[1] && r.channels == m.image_shape[2],
            ErrorKind::load, "shape mismatch in " + f.string());
    b.images.push_back(raster_to_image(r));
  }
  if (rec.role != DomainRole::target) {
    if (rec.kind == TaskKind::classification) {
      std::map<std::string, int> by_file;
      std::istringstream in(read_text(m.root / rec.labels));
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        require(comma != std::string::npos, ErrorKind::load, "bad label row '" + line + "'");
        const std::string file = line.substr(0, comma);
        int cls = -1;
        try {
          cls = std::stoi(line.substr(comma + 1));
        } catch (const std::exception&) {
          fail(ErrorKind::load, "bad label row '" + line + "'");
        }
        require(cls >= 0 && cls < rec.num_classes, ErrorKind::load,
                "label " + std::to_string(cls) + " out of range for " + file);
        by_file[file] = cls;
      }
      for (const auto& f : files) {
        const auto it = by_file.find(f.filename().string());
        require(it != by_file.end(), ErrorKind::load, "no label for " + f.filename().string());
        b.class_labels.push_back(it->second);
      }
    } else {
      for (const auto& f : files) {
        const fs::path lp = m.root / rec.labels / f.filename();
        const Raster r = read_png(lp);
        require(r.channels == 1, ErrorKind::load, "label raster must be single-channel: " + lp.string());
        require(r.height == m.image_shape[0] && r.width == m.image_shape[1], ErrorKind::load,
                "shape mismatch in " + lp.string());
        LabelMap lm(r.height, r.width);
        lm.labels = r.data;
        for (auto v : lm.labels)
          require(v == kIgnoreLabel || v < rec.num_classes, ErrorKind::load,
                  "label " + std::to_string(v) + " out of range in " + lp.string());
        b.label_maps.push_back(std::move(lm));
      }
    }
  }
  try {
    b.validate();
  } catch (const Error& e) {
    fail(ErrorKind::load, e.what());
  }
  return b;
}

inline std::string image_filename(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu.png", i);
  return buf;
}

/// Writes one bundle under root/<name>/ and returns its manifest record.
inline DomainRecord save_bundle(const fs::path& root, const DomainBundle& b, DomainRole role) {
  b.validate();
  DomainRecord rec;
  rec.name = b.name;
  rec.role = role;
  rec.kind = b.kind;
  rec.num_classes = b.num_classes;
  rec.image_dir = b.name + "/images";
  fs::create_directories(root / rec.image_dir);
  for (std::size_t i = 0; i < b.size(); ++i)
    write_png(root / rec.image_dir / image_filename(i), image_to_raster(b.images[i]));
  if (role == DomainRole::target || !b.labeled()) return rec;
  if (b.kind == TaskKind::classification) {
    rec.labels = b.name + "/labels.csv";
    std::ostringstream csv;
    csv << "filename,class\n";
    for (std::size_t i = 0; i < b.size(); ++i) csv << image_filename(i) << ',' << b.class_labels[i] << '\n';
    write_text_atomic(root / rec.labels, csv.str());
  } else {
    rec.labels = b.name + "/labels";
    fs::create_directories(root / rec.labels);
    for (std::size_t i = 0; i < b.size(); ++i) {
      const auto& lm = b.label_maps[i];
      write_png(root / rec.labels / image_filename(i), Raster{lm.height, lm.width, 1, lm.labels});
    }
  }
  return rec;
}

/// Writes sources, target (and optional held-out test split) plus manifest.json.
inline DatasetManifest save_dataset(const fs::path& root, const std::vector<DomainBundle>& sources,
                                    const DomainBundle& target, const DomainBundle* test = nullptr) {
  fs::create_directories(root);
  DatasetManifest m;
  m.root = root;
  m.image_shape = {target.height(), target.width(), target.channels()};
  for (const auto& s : sources) m.domains.push_back(save_bundle(root, s, DomainRole::source));
  m.domains.push_back(save_bundle(root, target, DomainRole::target));
  if (test != nullptr) m.domains.push_back(save_bundle(root, *test, DomainRole::test));
  m.validate();
  json j = to_json(m);
  j["root"] = ".";
  write_text_atomic(root / "manifest.json", j.dump(2) + "\n");
  return m;
}

}  // namespace madan
