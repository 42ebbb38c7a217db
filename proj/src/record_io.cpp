#include "handiff/record_io.hpp"

#include "handiff/config.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace handiff {

namespace {

constexpr char kMagic[4] = {'H', 'N', 'D', 'A'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  std::uint8_t b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  // host is little-endian on every supported target; keep byte order explicit
  static_assert(std::endian::native == std::endian::little, "big-endian hosts unsupported");
  out.insert(out.end(), b, b + sizeof(T));
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw Error(ErrorKind::Storage, "truncated array container");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return b_[pos_++];
  }
  template <typename T>
  T le() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, b_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<std::uint8_t>& b_;
  std::size_t pos_ = 0;
};

}  // namespace

Mat NamedArray::as_matrix() const {
  Eigen::Index rows = 1, cols = 1;
  if (shape.size() == 1) {
    rows = shape[0];
  } else if (shape.size() >= 2) {
    rows = shape[0];
    cols = 1;
    for (std::size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
  }
  Mat m(rows, cols);
  if (static_cast<std::size_t>(m.size()) != data.size()) throw Error(ErrorKind::Storage, "array size mismatch");
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = data[i];
  return m;
}

NamedArray make_array(const Mat& m, DType dtype) {
  NamedArray a;
  a.shape = {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
  a.dtype = dtype;
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

std::vector<std::uint8_t> encode_arrays(const ArrayMap& arrays) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(arrays.size()));
  for (const auto& [name, a] : arrays) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    out.push_back(static_cast<std::uint8_t>(a.dtype));
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    std::size_t count = 1;
    for (auto d : a.shape) {
      put_u32(out, d);
      count *= d;
    }
    if (count != a.data.size()) throw Error(ErrorKind::Storage, "array '" + name + "' shape/data mismatch");
    for (double v : a.data) {
      if (a.dtype == DType::F32) put_le(out, static_cast<float>(v));
      else put_le(out, v);
    }
  }
  return out;
}

ArrayMap decode_arrays(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  if (r.str(4) != std::string(kMagic, 4)) throw Error(ErrorKind::Storage, "bad array container magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw Error(ErrorKind::Storage, "unsupported container version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  ArrayMap out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t len = r.u32();
    std::string name = r.str(len);
    NamedArray a;
    const std::uint8_t dt = r.u8();
    if (dt > 1) throw Error(ErrorKind::Storage, "unknown dtype in '" + name + "'");
    a.dtype = static_cast<DType>(dt);
    const std::uint32_t ndim = r.u32();
    if (ndim > 8) throw Error(ErrorKind::Storage, "too many dimensions in '" + name + "'");
    std::size_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      a.shape.push_back(r.u32());
      n *= a.shape.back();
    }
    r.need(n * (a.dtype == DType::F32 ? 4 : 8));
    a.data.resize(n);
    for (std::size_t k = 0; k < n; ++k) a.data[k] = a.dtype == DType::F32 ? r.le<float>() : r.le<double>();
    out.emplace(std::move(name), std::move(a));
  }
  return out;
}

void write_arrays(const std::filesystem::path& path, const ArrayMap& arrays) {
  const auto bytes = encode_arrays(arrays);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error(ErrorKind::Storage, "write failed for " + path.string());
}

ArrayMap read_arrays(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error(ErrorKind::Storage, "cannot read " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_arrays(bytes);
}

std::filesystem::path record_path(const std::filesystem::path& dataset_dir, int index) {
  char name[32];
  std::snprintf(name, sizeof(name), "%06d.rec", index);
  return dataset_dir / "records" / name;
}

namespace {

Mat camera_row(const Camera& c) {
  Mat m(1, 17);
  m << c.focal, c.cx, c.cy, c.width, c.height, c.rotation(0, 0), c.rotation(0, 1), c.rotation(0, 2),
      c.rotation(1, 0), c.rotation(1, 1), c.rotation(1, 2), c.rotation(2, 0), c.rotation(2, 1), c.rotation(2, 2),
      c.translation.x(), c.translation.y(), c.translation.z();
  return m;
}

Camera camera_from(const Mat& m) {
  if (m.size() != 17) throw Error(ErrorKind::Storage, "camera array must hold 17 values");
  Camera c;
  const double* d = m.data();
  c.focal = d[0];
  c.cx = d[1];
  c.cy = d[2];
  c.width = static_cast<int>(d[3]);
  c.height = static_cast<int>(d[4]);
  for (int i = 0; i < 9; ++i) c.rotation(i / 3, i % 3) = d[5 + i];
  c.translation = Vec3(d[14], d[15], d[16]);
  return c;
}

Mat pose_row(const PoseSample& p) {
  Mat m(1, kNumDofs + 13);
  for (int i = 0; i < kNumDofs; ++i) m(0, i) = p.angles[i];
  for (int i = 0; i < 9; ++i) m(0, kNumDofs + i) = p.global_rotation(i / 3, i % 3);
  for (int i = 0; i < 3; ++i) m(0, kNumDofs + 9 + i) = p.global_translation[i];
  m(0, kNumDofs + 12) = p.scale;
  return m;
}

PoseSample pose_from(const Mat& m) {
  if (m.size() != kNumDofs + 13) throw Error(ErrorKind::Storage, "pose array has wrong length");
  PoseSample p;
  const double* d = m.data();
  for (int i = 0; i < kNumDofs; ++i) p.angles[i] = d[i];
  for (int i = 0; i < 9; ++i) p.global_rotation(i / 3, i % 3) = d[kNumDofs + i];
  for (int i = 0; i < 3; ++i) p.global_translation[i] = d[kNumDofs + 9 + i];
  p.scale = d[kNumDofs + 12];
  return p;
}

const NamedArray& need(const ArrayMap& m, const std::string& name, const std::filesystem::path& path) {
  auto it = m.find(name);
  if (it == m.end()) throw Error(ErrorKind::Storage, path.string() + " lacks array '" + name + "'");
  return it->second;
}

}  // namespace

void write_sample(const std::filesystem::path& path, const HandSample& s) {
  ArrayMap a;
  a["vertices"] = make_array(s.vertices);
  a["joints3d"] = make_array(s.joints3d);
  Mat j2(kNumJoints, 3);
  j2.leftCols(2) = s.joints2d;
  j2.col(2) = s.confidence;
  a["joints2d"] = make_array(j2);
  a["camera"] = make_array(camera_row(s.camera));
  a["pose"] = make_array(pose_row(s.pose), DType::F64);
  if (s.image) {
    NamedArray img;
    img.shape = {static_cast<std::uint32_t>(s.image->height), static_cast<std::uint32_t>(s.image->width),
                 static_cast<std::uint32_t>(s.image->channels)};
    img.data.assign(s.image->data.begin(), s.image->data.end());
    a["image"] = std::move(img);
  }
  write_arrays(path, a);
}

HandSample read_sample(const std::filesystem::path& path) {
  const ArrayMap a = read_arrays(path);
  HandSample s;
  s.vertices = need(a, "vertices", path).as_matrix();
  s.joints3d = need(a, "joints3d", path).as_matrix();
  const Mat j2 = need(a, "joints2d", path).as_matrix();
  if (j2.rows() != kNumJoints || j2.cols() != 3) throw Error(ErrorKind::Storage, "joints2d must be 21 x 3");
  s.joints2d = j2.leftCols(2);
  s.confidence = j2.col(2);
  s.camera = camera_from(need(a, "camera", path).as_matrix());
  s.pose = pose_from(need(a, "pose", path).as_matrix());
  if (auto it = a.find("image"); it != a.end()) {
    const NamedArray& img = it->second;
    if (img.shape.size() != 3) throw Error(ErrorKind::Storage, "image must be H x W x C");
    Image im;
    im.height = static_cast<int>(img.shape[0]);
    im.width = static_cast<int>(img.shape[1]);
    im.channels = static_cast<int>(img.shape[2]);
    im.data.assign(img.data.begin(), img.data.end());
    s.image = std::move(im);
  }
  return s;
}

void write_regressor(const std::filesystem::path& path, const JointRegressor& regressor) {
  ArrayMap a;
  a["weights"] = make_array(Mat(regressor.weights), DType::F64);
  write_arrays(path, a);
}

JointRegressor read_regressor(const std::filesystem::path& path) {
  const ArrayMap a = read_arrays(path);
  const Mat w = need(a, "weights", path).as_matrix();
  JointRegressor r;
  r.weights = w.sparseView();
  return r;
}

void write_manifest(const std::filesystem::path& path, const DatasetManifest& m, const DatasetConfig& config) {
  Json j;
  j["format"] = "handiff-dataset";
  j["version"] = m.version;
  j["seed"] = m.seed;
  j["count"] = m.count;
  j["splits"] = {{"train", m.train}, {"val", m.val}, {"test", m.test}};
  j["rig_hash"] = m.rig_hash;
  j["pose_only"] = m.pose_only;
  j["config"] = dataset_config_to_json(config);
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw Error(ErrorKind::Storage, "cannot write " + path.string());
  f << j.dump(2) << "\n";
}

DatasetManifest read_manifest(const std::filesystem::path& path, DatasetConfig* config) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorKind::Storage, "cannot read " + path.string());
  Json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::Storage, "malformed manifest " + path.string() + ": " + e.what());
  }
  DatasetManifest m;
  m.version = j.at("version").get<int>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.count = j.at("count").get<int>();
  m.train = j.at("splits").at("train").get<int>();
  m.val = j.at("splits").at("val").get<int>();
  m.test = j.at("splits").at("test").get<int>();
  m.rig_hash = j.at("rig_hash").get<std::string>();
  m.pose_only = j.at("pose_only").get<std::vector<int>>();
  if (config) *config = dataset_config_from_json(j.at("config"));
  return m;
}

}  // namespace handiff
