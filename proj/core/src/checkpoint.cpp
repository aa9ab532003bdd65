#include "cfcm/checkpoint.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "cfcm/errors.hpp"

namespace cfcm {

namespace {

void put_u32(std::ofstream& out, std::uint32_t v) {
  char bytes[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                   static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(bytes, 4);
}

struct Cursor {
  const std::vector<std::uint8_t>& bytes;
  std::size_t pos = 0;
  std::string path;

  void need(std::size_t n, const char* what) const {
    if (bytes.size() - pos < n) {
      throw ParseError(path + ": truncated checkpoint while reading " + std::string(what), pos);
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    const std::uint32_t v = static_cast<std::uint32_t>(bytes[pos]) |
                            static_cast<std::uint32_t>(bytes[pos + 1]) << 8 |
                            static_cast<std::uint32_t>(bytes[pos + 2]) << 16 |
                            static_cast<std::uint32_t>(bytes[pos + 3]) << 24;
    pos += 4;
    return v;
  }

  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

void save_checkpoint(const std::string& path, const std::string& config_text,
                     const std::vector<std::pair<std::string, Tensor4<float>>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write("CFCM", 4);
  put_u32(out, kCheckpointVersion);
  put_u32(out, static_cast<std::uint32_t>(config_text.size()));
  out.write(config_text.data(), static_cast<std::streamsize>(config_text.size()));
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, tensor] : tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(out, 4);
    const auto& s = tensor.shape();
    put_u32(out, static_cast<std::uint32_t>(s.n));
    put_u32(out, static_cast<std::uint32_t>(s.c));
    put_u32(out, static_cast<std::uint32_t>(s.h));
    put_u32(out, static_cast<std::uint32_t>(s.w));
    static_assert(sizeof(float) == 4);
    out.write(reinterpret_cast<const char*>(tensor.data().data()),
              static_cast<std::streamsize>(tensor.numel() * 4));
  }
  if (!out) throw IoError("write failed for " + path);
}

void save_checkpoint(const std::string& path, SegModel<float>& model,
                     const AdamState<float>* optimizer, const std::string& config_text) {
  std::vector<std::pair<std::string, Tensor4<float>>> tensors;
  std::vector<ParamRef<float>> params, buffers;
  model.collect(params, buffers);
  for (const auto& p : params) tensors.emplace_back(p.name, *p.tensor);
  for (const auto& b : buffers) tensors.emplace_back(b.name, *b.tensor);
  if (optimizer) {
    Tensor4<float> step({1, 1, 1, 1}, static_cast<float>(optimizer->step));
    tensors.emplace_back("optim.step", step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      tensors.emplace_back("optim.m." + params[i].name, optimizer->slots[i].m);
      tensors.emplace_back("optim.v." + params[i].name, optimizer->slots[i].v);
    }
  }
  save_checkpoint(path, config_text, tensors);
}

CheckpointData read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("checkpoint file not found: " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  Cursor cur{bytes, 0, path};

  const std::string magic = cur.str(4, "magic");
  if (magic != "CFCM") throw ParseError(path + ": bad magic, not a checkpoint", 0);
  CheckpointData data;
  data.version = cur.u32("version");
  if (data.version != kCheckpointVersion) {
    throw ParseError(path + ": unsupported checkpoint version " + std::to_string(data.version) +
                         ", expected " + std::to_string(kCheckpointVersion),
                     4);
  }
  const std::uint32_t config_len = cur.u32("config length");
  data.config_text = cur.str(config_len, "config text");

  const std::uint32_t count = cur.u32("tensor count");
  data.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = cur.u32("tensor name length");
    std::string name = cur.str(name_len, "tensor name");
    const std::uint32_t rank = cur.u32("tensor rank");
    if (rank != 4) {
      throw ParseError(path + ": tensor '" + name + "' has rank " + std::to_string(rank) +
                           ", expected 4",
                       cur.pos - 4);
    }
    Shape4 shape;
    shape.n = cur.u32("dim");
    shape.c = cur.u32("dim");
    shape.h = cur.u32("dim");
    shape.w = cur.u32("dim");
    if (shape.n < 1 || shape.c < 1 || shape.h < 1 || shape.w < 1) {
      throw ParseError(path + ": tensor '" + name + "' has invalid shape", cur.pos);
    }
    const std::size_t payload = static_cast<std::size_t>(shape.numel()) * 4;
    cur.need(payload, "tensor payload");
    std::vector<float> values(static_cast<std::size_t>(shape.numel()));
    std::memcpy(values.data(), bytes.data() + cur.pos, payload);
    cur.pos += payload;
    data.tensors.emplace_back(std::move(name), Tensor4<float>::from_data(shape, std::move(values)));
  }
  return data;
}

void load_into(SegModel<float>& model, const CheckpointData& checkpoint) {
  std::vector<ParamRef<float>> params, buffers;
  model.collect(params, buffers);
  std::vector<ParamRef<float>> all = params;
  all.insert(all.end(), buffers.begin(), buffers.end());

  for (const auto& ref : all) {
    const auto it = std::find_if(checkpoint.tensors.begin(), checkpoint.tensors.end(),
                                 [&](const auto& kv) { return kv.first == ref.name; });
    if (it == checkpoint.tensors.end()) {
      throw InvalidArgument("checkpoint is missing tensor '" + ref.name + "'");
    }
    if (!(it->second.shape() == ref.tensor->shape())) {
      throw InvalidArgument("checkpoint tensor '" + ref.name + "' has shape " +
                            to_string(it->second.shape()) + ", model expects " +
                            to_string(ref.tensor->shape()));
    }
    auto dst = ref.tensor->mutable_data();
    const auto src = it->second.data();
    std::copy(src.begin(), src.end(), dst.begin());
  }
}

}  // namespace cfcm
