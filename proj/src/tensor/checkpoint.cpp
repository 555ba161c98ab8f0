#include "casam/tensor/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_map>

namespace casam::tensor {

void ByteWriter::u32(std::uint32_t v) {
  for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::u64(std::uint64_t v) {
  for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void ByteWriter::f32(float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, sizeof bits);
  u32(bits);
}

void ByteWriter::bytes(const void* data, std::size_t len) {
  const auto* p = static_cast<const unsigned char*>(data);
  buf_.insert(buf_.end(), p, p + len);
}

void ByteWriter::floats(std::span<const float> values) {
  buf_.reserve(buf_.size() + 4 * values.size());
  for (float v : values) f32(v);
}

void ByteReader::need(std::size_t n) const {
  if (pos_ + n > buf_.size()) throw FormatError("unexpected end of data");
}

std::uint32_t ByteReader::u32() {
  need(4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64() {
  need(8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf_[pos_ + i]) << (8 * i);
  pos_ += 8;
  return v;
}

float ByteReader::f32() {
  const std::uint32_t bits = u32();
  float v;
  std::memcpy(&v, &bits, sizeof v);
  return v;
}

std::string ByteReader::string(std::size_t len) {
  need(len);
  std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), len);
  pos_ += len;
  return s;
}

void ByteReader::floats(std::span<float> out) {
  need(4 * out.size());
  for (auto& v : out) v = f32();
}

std::vector<unsigned char> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<unsigned char>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint Checkpoint::capture(const ParameterRefs& params, std::int32_t task_id, std::uint32_t n_blocks) {
  Checkpoint ck;
  ck.task_id = task_id;
  ck.n_blocks = n_blocks;
  for (const Parameter* p : params) {
    const auto d = p->value().data();
    ck.arrays.push_back({p->name(), p->shape(), {d.begin(), d.end()}});
  }
  return ck;
}

void Checkpoint::restore(const ParameterRefs& params) const {
  std::unordered_map<std::string, const Array*> by_name;
  for (const auto& a : arrays) by_name.emplace(a.name, &a);
  for (Parameter* p : params) {
    const auto it = by_name.find(p->name());
    if (it == by_name.end()) throw FormatError("checkpoint is missing array '" + p->name() + "'");
    if (it->second->shape != p->shape()) {
      throw FormatError("checkpoint array '" + p->name() + "' has shape " +
                        to_string(it->second->shape) + ", expected " + to_string(p->shape()));
    }
    auto dst = p->value().mutable_data();
    std::memcpy(dst.data(), it->second->data.data(), dst.size() * sizeof(float));
    p->reset_adam_state();
  }
}

std::vector<unsigned char> Checkpoint::serialize() const {
  ByteWriter w;
  w.bytes(kMagic.data(), kMagic.size());
  w.u32(kVersion);
  w.i32(task_id);
  w.u32(n_blocks);
  w.u32(static_cast<std::uint32_t>(arrays.size()));
  for (const auto& a : arrays) {
    w.u32(static_cast<std::uint32_t>(a.name.size()));
    w.bytes(a.name.data(), a.name.size());
    w.u32(static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) w.u32(static_cast<std::uint32_t>(d));
    w.floats(a.data);
  }
  return w.buffer();
}

Checkpoint Checkpoint::deserialize(std::vector<unsigned char> bytes) {
  ByteReader r(std::move(bytes));
  const std::string magic = r.string(kMagic.size());
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0) {
    throw FormatError("bad checkpoint magic");
  }
  const std::uint32_t version = r.u32();
  if (version != kVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint ck;
  ck.task_id = r.i32();
  ck.n_blocks = r.u32();
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    Array a;
    a.name = r.string(r.u32());
    const std::uint32_t rank = r.u32();
    for (std::uint32_t k = 0; k < rank; ++k) a.shape.push_back(r.u32());
    a.data.resize(numel(a.shape));
    r.floats(a.data);
    ck.arrays.push_back(std::move(a));
  }
  if (!r.exhausted()) throw FormatError("trailing bytes after checkpoint arrays");
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const { write_file_bytes(path, serialize()); }

Checkpoint Checkpoint::load(const std::filesystem::path& path) { return deserialize(read_file_bytes(path)); }

}  // namespace casam::tensor
