#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "diffseg/data.hpp"
#include "diffseg/tensor.hpp"

namespace diffseg {

namespace detail {

inline const std::set<std::string>& raster_extensions() {
  static const std::set<std::string> exts = {".png", ".tif", ".tiff",
                                             ".jpg", ".jpeg", ".bmp"};
  return exts;
}

inline std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace detail

// 8- or 16-bit raster -> [C,H,W] float normalized to [-1, 1]; BGR storage is
// reordered to RGB.
inline Tensor<float> load_image_file(const std::filesystem::path& path) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  require_data(!img.empty(), "load_image_file: unreadable file ", path.string());
  int depth = img.depth();
  require_data(depth == CV_8U || depth == CV_16U,
               "load_image_file: only 8- and 16-bit rasters supported: ", path.string());
  double scale = depth == CV_8U ? 127.5 : 32767.5;
  if (img.channels() == 4) cv::cvtColor(img, img, cv::COLOR_BGRA2BGR);
  int c = img.channels();
  require_data(c == 1 || c == 3, "load_image_file: unsupported channel count in ",
               path.string());
  Tensor<float> out({c, img.rows, img.cols});
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double v = depth == CV_8U
                       ? (c == 1 ? img.at<uint8_t>(y, x) : img.at<cv::Vec3b>(y, x)[ch])
                       : (c == 1 ? img.at<uint16_t>(y, x)
                                 : img.at<cv::Vec3w>(y, x)[ch]);
        int rgb = c == 3 ? 2 - ch : ch;  // BGR -> RGB
        out[(rgb * img.rows + y) * img.cols + x] = static_cast<float>(v / scale - 1.0);
      }
  return out;
}

// Class-index mask file; pixel values must be < num_classes.
inline Tensor<int32_t> load_label_file(const std::filesystem::path& path, int num_classes) {
  cv::Mat img = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  require_data(!img.empty(), "load_label_file: unreadable file ", path.string());
  require_data(img.channels() == 1, "load_label_file: mask must be single-channel: ",
               path.string());
  require_data(img.depth() == CV_8U || img.depth() == CV_16U,
               "load_label_file: only 8- and 16-bit masks supported: ", path.string());
  Tensor<int32_t> out({img.rows, img.cols});
  for (int y = 0; y < img.rows; ++y)
    for (int x = 0; x < img.cols; ++x) {
      int v = img.depth() == CV_8U ? img.at<uint8_t>(y, x) : img.at<uint16_t>(y, x);
      require_data(v < num_classes, "load_label_file: mask value ", v, " >= num_classes in ",
                   path.string());
      out[y * img.cols + x] = v;
    }
  return out;
}

inline void save_image_png(const std::filesystem::path& path, const Tensor<float>& image) {
  require(image.rank() == 3, "save_image_png: expects [C,H,W]");
  int c = static_cast<int>(image.dim(0));
  int h = static_cast<int>(image.dim(1));
  int w = static_cast<int>(image.dim(2));
  require(c == 1 || c == 3, "save_image_png: unsupported channel count");
  cv::Mat img(h, w, c == 1 ? CV_8UC1 : CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int ch = 0; ch < c; ++ch) {
        double v = (image[(ch * h + y) * w + x] + 1.0) * 127.5;
        auto b = static_cast<uint8_t>(std::clamp(v, 0.0, 255.0) + 0.5);
        if (c == 1)
          img.at<uint8_t>(y, x) = b;
        else
          img.at<cv::Vec3b>(y, x)[2 - ch] = b;  // RGB -> BGR
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  require_data(cv::imwrite(path.string(), img), "save_image_png: write failed for ",
               path.string());
}

inline void save_label_png(const std::filesystem::path& path, const Tensor<int32_t>& label) {
  require(label.rank() == 2, "save_label_png: expects [H,W]");
  int h = static_cast<int>(label.dim(0));
  int w = static_cast<int>(label.dim(1));
  cv::Mat img(h, w, CV_8UC1);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int32_t v = label[y * w + x];
      require(v >= 0 && v <= 255, "save_label_png: class index out of 8-bit range");
      img.at<uint8_t>(y, x) = static_cast<uint8_t>(v);
    }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  require_data(cv::imwrite(path.string(), img), "save_label_png: write failed for ",
               path.string());
}

// Folder layout: <root>/images/*.png|.tif plus optional <root>/masks/<same
// stem>.png with class indices as pixel values. Deterministic lexicographic
// order; images without masks load as unlabeled samples.
inline std::vector<SegmentationSample> load_folder_dataset(
    const std::filesystem::path& root, int num_classes) {
  namespace fs = std::filesystem;
  fs::path images_dir = root / "images";
  fs::path masks_dir = root / "masks";
  require_data(fs::is_directory(images_dir), "load_folder_dataset: missing ",
               images_dir.string());

  std::vector<fs::path> image_files;
  for (const auto& e : fs::directory_iterator(images_dir))
    if (e.is_regular_file() &&
        detail::raster_extensions().count(detail::lower(e.path().extension().string())))
      image_files.push_back(e.path());
  std::sort(image_files.begin(), image_files.end());

  std::set<std::string> image_stems;
  for (const auto& p : image_files) image_stems.insert(p.stem().string());

  std::vector<fs::path> mask_files;
  if (fs::is_directory(masks_dir)) {
    for (const auto& e : fs::directory_iterator(masks_dir))
      if (e.is_regular_file() &&
          detail::raster_extensions().count(detail::lower(e.path().extension().string())))
        mask_files.push_back(e.path());
    for (const auto& m : mask_files)
      require_data(image_stems.count(m.stem().string()) == 1,
                   "load_folder_dataset: mask without matching image: ", m.string());
  }

  std::vector<SegmentationSample> out;
  for (const auto& p : image_files) {
    SegmentationSample s;
    s.id = p.stem().string();
    s.image = load_image_file(p);
    for (const auto& m : mask_files)
      if (m.stem().string() == s.id) {
        s.label = load_label_file(m, num_classes);
        require_data(s.label->dim(0) == s.image.dim(1) &&
                         s.label->dim(1) == s.image.dim(2),
                     "load_folder_dataset: mask shape mismatch for ", s.id);
        break;
      }
    out.push_back(std::move(s));
  }
  return out;
}

inline void export_folder_dataset(const std::filesystem::path& root,
                                  const std::vector<SegmentationSample>& samples) {
  for (const auto& s : samples) {
    save_image_png(root / "images" / (s.id + ".png"), s.image);
    if (s.label) save_label_png(root / "masks" / (s.id + ".png"), *s.label);
  }
}

// Raw volume file: one JSON header line {"dims":[C,D,H,W],"dtype":"float32"}
// terminated by '\n', then little-endian float32 payload in C,D,H,W order.
inline void save_volume(const std::filesystem::path& path, const Tensor<float>& volume) {
  require(volume.rank() == 4, "save_volume: expects [C,D,H,W]");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  require_data(os.good(), "save_volume: cannot open ", path.string());
  nlohmann::json header{{"dims", volume.shape()}, {"dtype", "float32"}};
  os << header.dump() << "\n";
  os.write(reinterpret_cast<const char*>(volume.data()),
           static_cast<std::streamsize>(sizeof(float) * volume.numel()));
  require_data(os.good(), "save_volume: write failed for ", path.string());
}

inline Tensor<float> load_volume(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require_data(is.good(), "load_volume: cannot open ", path.string());
  std::string line;
  std::getline(is, line);
  nlohmann::json header = nlohmann::json::parse(line);
  require_data(header.value("dtype", "") == "float32", "load_volume: unsupported dtype");
  std::vector<int64_t> dims = header.at("dims").get<std::vector<int64_t>>();
  require_data(dims.size() == 4, "load_volume: expects 4 dims");
  Tensor<float> out(dims);
  is.read(reinterpret_cast<char*>(out.data()),
          static_cast<std::streamsize>(sizeof(float) * out.numel()));
  require_data(is.gcount() == static_cast<std::streamsize>(sizeof(float) * out.numel()),
               "load_volume: truncated payload in ", path.string());
  return out;
}

}  // namespace diffseg
