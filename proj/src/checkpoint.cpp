#include "lwf/checkpoint.hpp"

#include "lwf/binary_io.hpp"
#include "lwf/errors.hpp"

namespace lwf {

namespace {

constexpr char kMagic[] = "CLWF";

std::vector<const Tensor*> net_parameters(const MultiHeadNet& net) {
  std::vector<const Tensor*> out = net.trunk().parameters();
  for (const Head& h : net.heads()) {
    out.push_back(&h.weight);
    out.push_back(&h.bias);
  }
  return out;
}

void put_config(ByteWriter& w, const TrunkConfig& c) {
  for (std::size_t v : {c.in_channels, c.in_height, c.in_width, c.stem_kernel, c.stem_stride, c.stem_channels}) {
    w.put_u32(static_cast<std::uint32_t>(v));
  }
  w.put_u32(static_cast<std::uint32_t>(c.stage_blocks.size()));
  for (std::size_t b : c.stage_blocks) w.put_u32(static_cast<std::uint32_t>(b));
  for (std::size_t ch : c.stage_channels) w.put_u32(static_cast<std::uint32_t>(ch));
}

TrunkConfig get_config(ByteReader& r) {
  TrunkConfig c;
  c.in_channels = r.get_u32();
  c.in_height = r.get_u32();
  c.in_width = r.get_u32();
  c.stem_kernel = r.get_u32();
  c.stem_stride = r.get_u32();
  c.stem_channels = r.get_u32();
  const std::uint32_t stages = r.get_u32();
  if (stages > 64) throw IntegrityError("checkpoint: implausible stage count " + std::to_string(stages));
  c.stage_blocks.resize(stages);
  c.stage_channels.resize(stages);
  for (auto& b : c.stage_blocks) b = r.get_u32();
  for (auto& ch : c.stage_channels) ch = r.get_u32();
  return c;
}

void read_array(ByteReader& r, Tensor& t, const char* what) {
  const std::uint64_t n = r.get_u64();
  if (n != t.numel()) {
    throw IntegrityError(std::string("checkpoint: ") + what + " has " + std::to_string(n) + " values, expected " +
                         std::to_string(t.numel()));
  }
  r.get_f64s(t.data());
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const MultiHeadNet& net, const Rng& rng, std::uint64_t config_hash) {
  ByteWriter w;
  w.put_bytes(std::string_view(kMagic, 4));
  w.put_u32(kCheckpointVersion);
  put_config(w, net.trunk().config());
  w.put_u32(static_cast<std::uint32_t>(net.heads().size()));
  for (const Head& h : net.heads()) {
    w.put_u32(static_cast<std::uint32_t>(h.task_id));
    w.put_u32(static_cast<std::uint32_t>(h.class_count));
    w.put_u8(h.role == HeadRole::New ? 1 : 0);
  }
  const auto params = net_parameters(net);
  w.put_u32(static_cast<std::uint32_t>(params.size()));
  for (const Tensor* p : params) {
    w.put_u64(p->numel());
    w.put_f64s(p->data());
  }
  const auto buffers = net.trunk().buffers();
  w.put_u32(static_cast<std::uint32_t>(buffers.size()));
  for (const Tensor* b : buffers) {
    w.put_u64(b->numel());
    w.put_f64s(b->data());
  }
  w.put_u64(rng.key());
  w.put_u64(rng.counter());
  w.put_u64(config_hash);
  w.put_u64(fnv1a64(w.bytes()));
  return std::move(w.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  if (bytes.size() < 4 || r.get_bytes(4) != std::string_view(kMagic, 4)) {
    throw FormatError("not a CLWF checkpoint (bad magic)");
  }
  const std::uint32_t version = r.get_u32();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  if (bytes.size() < 16) throw IntegrityError("checkpoint truncated");
  const std::uint64_t stored = ByteReader(bytes.subspan(bytes.size() - 8)).get_u64();
  if (stored != fnv1a64(bytes.first(bytes.size() - 8))) {
    throw IntegrityError("checkpoint checksum mismatch (truncated or corrupted)");
  }

  const TrunkConfig config = get_config(r);
  try {
    config.validate();
  } catch (const ConfigError& e) {
    throw IntegrityError(std::string("checkpoint: invalid trunk config: ") + e.what());
  }
  // Weights are overwritten below; the generator only fixes the shapes.
  Rng scratch(0);
  MultiHeadNet net = build_micro_resnet(config, scratch);
  const std::uint32_t n_heads = r.get_u32();
  std::vector<HeadRole> roles;
  for (std::uint32_t i = 0; i < n_heads; ++i) {
    const auto task_id = static_cast<int>(r.get_u32());
    const std::uint32_t classes = r.get_u32();
    roles.push_back(r.get_u8() == 1 ? HeadRole::New : HeadRole::Old);
    if (classes > (1u << 20)) throw IntegrityError("checkpoint: implausible class count");
    try {
      net.append_head(task_id, classes, scratch);
    } catch (const ContractError& e) {
      throw IntegrityError(std::string("checkpoint: bad head registry: ") + e.what());
    }
  }
  for (std::uint32_t i = 0; i < n_heads; ++i) net.heads()[i].role = roles[i];

  const auto params = net.parameters();
  if (r.get_u32() != params.size()) throw IntegrityError("checkpoint: parameter count mismatch");
  for (Tensor* p : params) read_array(r, *p, "parameter");
  const auto buffers = net.buffers();
  if (r.get_u32() != buffers.size()) throw IntegrityError("checkpoint: buffer count mismatch");
  for (Tensor* b : buffers) read_array(r, *b, "batch-norm buffer");
  const std::uint64_t key = r.get_u64();
  const std::uint64_t counter = r.get_u64();
  const std::uint64_t config_hash = r.get_u64();
  if (r.remaining() != 8) throw IntegrityError("checkpoint: unexpected trailing bytes");
  return Checkpoint{std::move(net), Rng(key, counter), config_hash};
}

void save_checkpoint(const MultiHeadNet& net, const std::filesystem::path& path, const Rng& rng,
                     std::uint64_t config_hash) {
  write_file_atomic(path, encode_checkpoint(net, rng, config_hash));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode_checkpoint(bytes);
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.what());
  } catch (const IntegrityError& e) {
    throw IntegrityError(path.string() + ": " + e.what());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

}  // namespace lwf
