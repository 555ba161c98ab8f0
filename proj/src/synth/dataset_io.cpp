#include "casam/synth/dataset_io.hpp"

#include <fstream>

#include "casam/tensor/checkpoint.hpp"

namespace casam::synth {

using tensor::FormatError;
using json = nlohmann::ordered_json;

namespace {
constexpr char kSampleMagic[4] = {'C', 'S', 'D', 'S'};
constexpr std::uint32_t kSampleVersion = 1;
constexpr const char* kStreamFormat = "casam-stream";
constexpr int kStreamVersion = 1;

json rgb_json(const Rgb& c) { return json::array({c[0], c[1], c[2]}); }
Rgb rgb_from(const json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("colour must be a 3-element array");
  return {j[0].get<float>(), j[1].get<float>(), j[2].get<float>()};
}
}  // namespace

void to_json(json& j, const TaskSpec& s) {
  j = json{{"task_id", s.task_id},
           {"name", s.name},
           {"shape_family", to_string(s.shape_family)},
           {"texture",
            {{"foreground", rgb_json(s.texture.foreground)},
             {"background", rgb_json(s.texture.background)},
             {"color_jitter", s.texture.color_jitter},
             {"noise", s.texture.noise}}},
           {"geometry",
            {{"min_size", s.geometry.min_size},
             {"max_size", s.geometry.max_size},
             {"min_eccentricity", s.geometry.min_eccentricity},
             {"max_eccentricity", s.geometry.max_eccentricity}}},
           {"seed", s.seed}};
}

void from_json(const json& j, TaskSpec& s) {
  s.task_id = j.at("task_id").get<int>();
  s.name = j.at("name").get<std::string>();
  s.shape_family = shape_family_from_string(j.at("shape_family").get<std::string>());
  const auto& t = j.at("texture");
  s.texture.foreground = rgb_from(t.at("foreground"));
  s.texture.background = rgb_from(t.at("background"));
  s.texture.color_jitter = t.at("color_jitter").get<float>();
  s.texture.noise = t.at("noise").get<float>();
  const auto& g = j.at("geometry");
  s.geometry.min_size = g.at("min_size").get<float>();
  s.geometry.max_size = g.at("max_size").get<float>();
  s.geometry.min_eccentricity = g.at("min_eccentricity").get<float>();
  s.geometry.max_eccentricity = g.at("max_eccentricity").get<float>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.validate();
}

void write_samples(const Dataset& data, const std::filesystem::path& path) {
  tensor::ByteWriter w;
  w.bytes(kSampleMagic, 4);
  w.u32(kSampleVersion);
  w.u32(static_cast<std::uint32_t>(data.size()));
  w.u32(kImageChannels);
  w.u32(kImageSize);
  w.u32(kImageSize);
  for (const auto& s : data) {
    if (s.image.size() != kImageChannels * kImageSize * kImageSize || s.mask.size() != kImageSize * kImageSize)
      throw tensor::DimensionError("sample has unexpected dimensions");
    w.i32(s.task_id);
    w.i32(s.box.x0);
    w.i32(s.box.y0);
    w.i32(s.box.x1);
    w.i32(s.box.y1);
    w.floats(s.image);
    w.floats(s.mask);
  }
  tensor::write_file_bytes(path, w.buffer());
}

Dataset read_samples(const std::filesystem::path& path) {
  tensor::ByteReader r(tensor::read_file_bytes(path));
  if (r.string(4) != std::string(kSampleMagic, 4)) throw FormatError(path.string() + ": not a sample file");
  if (const auto v = r.u32(); v != kSampleVersion)
    throw FormatError(path.string() + ": unsupported sample file version " + std::to_string(v));
  const std::uint32_t n = r.u32(), c = r.u32(), h = r.u32(), w = r.u32();
  if (c != kImageChannels || h != kImageSize || w != kImageSize)
    throw FormatError(path.string() + ": sample dims do not match this build");
  Dataset out(n);
  for (auto& s : out) {
    s.task_id = r.i32();
    s.box = {r.i32(), r.i32(), r.i32(), r.i32()};
    s.image.resize(c * h * w);
    s.mask.resize(h * w);
    r.floats(s.image);
    r.floats(s.mask);
  }
  if (!r.exhausted()) throw FormatError(path.string() + ": trailing bytes");
  return out;
}

void export_stream(const Stream& stream, std::uint64_t master_seed, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  json tasks = json::array();
  for (const auto& t : stream) {
    const std::string stem = "task_" + std::to_string(t.spec.task_id);
    write_samples(t.train, dir / (stem + "_train.bin"));
    write_samples(t.test, dir / (stem + "_test.bin"));
    json entry;
    to_json(entry, t.spec);
    tasks.push_back({{"spec", entry},
                     {"train_file", stem + "_train.bin"},
                     {"test_file", stem + "_test.bin"},
                     {"n_train", t.train.size()},
                     {"n_test", t.test.size()}});
  }
  const json meta{{"format", kStreamFormat},
                  {"version", kStreamVersion},
                  {"master_seed", master_seed},
                  {"image", {{"channels", kImageChannels}, {"height", kImageSize}, {"width", kImageSize}}},
                  {"tasks", tasks}};
  std::ofstream out(dir / "stream.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write " + (dir / "stream.json").string());
  out << meta.dump(2) << '\n';
}

Stream import_stream(const std::filesystem::path& dir, std::uint64_t* master_seed) {
  std::ifstream in(dir / "stream.json");
  if (!in) throw FormatError("cannot open " + (dir / "stream.json").string());
  try {
    const json meta = json::parse(in);
    if (meta.value("format", "") != kStreamFormat) throw FormatError("not a stream metadata document");
    if (meta.value("version", -1) != kStreamVersion) throw FormatError("unsupported stream metadata version");
    if (master_seed) *master_seed = meta.at("master_seed").get<std::uint64_t>();
    Stream stream;
    for (const auto& t : meta.at("tasks")) {
      TaskData d;
      from_json(t.at("spec"), d.spec);
      d.train = read_samples(dir / t.at("train_file").get<std::string>());
      d.test = read_samples(dir / t.at("test_file").get<std::string>());
      if (d.train.size() != t.at("n_train").get<std::size_t>() || d.test.size() != t.at("n_test").get<std::size_t>())
        throw FormatError("sample counts disagree with stream.json");
      stream.push_back(std::move(d));
    }
    return stream;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed stream metadata: ") + e.what());
  }
}

}  // namespace casam::synth
