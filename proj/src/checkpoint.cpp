#include "djpq/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"

namespace djpq {

namespace {

constexpr char kMagic[8] = {'D', 'J', 'P', 'Q', 'C', 'K', 'P', 'T'};
constexpr std::size_t kHeader = 8 + 4 + 8;

class Writer {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  void i32(std::int32_t v) { u32(static_cast<std::uint32_t>(v)); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void str(const std::string& s) {
    u64(s.size());
    buf_.insert(buf_.end(), s.begin(), s.end());
  }
  void floats(std::span<const float> v) {
    u64(v.size());
    for (float x : v) f32(x);
  }
  void tensor(const Tensor& t) {
    u8(t.defined() ? 1 : 0);
    if (!t.defined()) return;
    u8(t.requires_grad() ? 1 : 0);
    u32(static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) u64(d);
    for (float x : t.data()) f32(x);
  }
  std::vector<std::uint8_t>& bytes() { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

class Reader {
 public:
  Reader(std::span<const std::uint8_t> b, std::size_t base) : b_(b), base_(base) {}
  std::size_t offset() const { return base_ + pos_; }
  void need(std::uint64_t n, const char* what) {
    if (n > b_.size() - pos_) throw FormatError(std::string("checkpoint truncated reading ") + what, offset());
  }
  std::uint8_t u8(const char* what) {
    need(1, what);
    return b_[pos_++];
  }
  bool flag(const char* what) {
    const auto at = offset();
    const std::uint8_t v = u8(what);
    if (v > 1) throw FormatError(std::string("invalid flag for ") + what, at);
    return v == 1;
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{b_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= std::uint64_t{b_[pos_ + i]} << (8 * i);
    pos_ += 8;
    return v;
  }
  std::int32_t i32(const char* what) { return static_cast<std::int32_t>(u32(what)); }
  float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
  double f64(const char* what) { return std::bit_cast<double>(u64(what)); }
  std::string str(const char* what) {
    const std::uint64_t n = u64(what);
    need(n, what);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats(const char* what) {
    const std::uint64_t n = u64(what);
    if (n > (b_.size() - pos_) / 4) throw FormatError(std::string("checkpoint truncated reading ") + what, offset());
    std::vector<float> v(n);
    for (auto& x : v) x = f32(what);
    return v;
  }
  Tensor tensor(const char* what) {
    if (!flag(what)) return {};
    const bool rg = flag(what);
    const auto at = offset();
    const std::uint32_t rank = u32(what);
    if (rank == 0 || rank > 8) throw FormatError(std::string("bad tensor rank for ") + what, at);
    Shape shape;
    std::uint64_t numel = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      const std::uint64_t d = u64(what);
      if (d == 0 || d > b_.size()) throw FormatError(std::string("bad tensor dimension for ") + what, offset() - 8);
      numel *= d;
      if (numel > b_.size()) throw FormatError(std::string("tensor larger than file for ") + what, offset() - 8);
      shape.push_back(d);
    }
    need(numel * 4, what);
    std::vector<float> data(numel);
    for (auto& x : data) x = f32(what);
    try {
      return Tensor(shape, std::move(data), rg);
    } catch (const DataError& e) {
      throw FormatError(std::string(what) + ": " + e.what(), at);
    }
  }
  bool done() const { return pos_ == b_.size(); }

 private:
  std::span<const std::uint8_t> b_;
  std::size_t base_;
  std::size_t pos_ = 0;
};

void write_quant(Writer& w, const std::optional<TrainableQuantizer>& q) {
  w.u8(q ? 1 : 0);
  if (!q) return;
  w.tensor(q->d);
  w.tensor(q->q_m);
  w.tensor(q->t);
  w.f64(q->q_s);
  w.u8(q->is_signed ? 1 : 0);
  w.u8(q->frozen ? 1 : 0);
  if (q->frozen) {
    const auto& s = q->frozen->state;
    w.f64(s.d);
    w.f64(s.q_m);
    w.f64(s.t);
    w.f64(s.q_s);
    w.u8(s.is_signed ? 1 : 0);
    w.i32(q->frozen->bits);
  }
}

std::optional<TrainableQuantizer> read_quant(Reader& r) {
  if (!r.flag("quantizer")) return std::nullopt;
  TrainableQuantizer q;
  q.d = r.tensor("quantizer d");
  q.q_m = r.tensor("quantizer q_m");
  q.t = r.tensor("quantizer t");
  q.q_s = r.f64("quantizer q_s");
  q.is_signed = r.flag("quantizer sign");
  const auto at = r.offset();
  if (!q.d.defined() || !q.q_m.defined() || q.d.numel() != 1 || q.q_m.numel() != 1 ||
      (q.t.defined() && q.t.numel() != 1)) {
    throw FormatError("quantizer parameters must be scalars", at);
  }
  if (r.flag("frozen")) {
    TrainableQuantizer::Frozen f;
    f.state.d = r.f64("frozen d");
    f.state.q_m = r.f64("frozen q_m");
    f.state.t = r.f64("frozen t");
    f.state.q_s = r.f64("frozen q_s");
    f.state.is_signed = r.flag("frozen sign");
    f.bits = r.i32("frozen bits");
    try {
      f.state.validate();
    } catch (const Error& e) {
      throw FormatError(std::string("frozen quantizer: ") + e.what(), at);
    }
    q.frozen = f;
  }
  return q;
}

void write_config(Writer& w, const LayerConfig& c) {
  w.str(c.name);
  w.u8(c.kind == LayerKind::kConv ? 0 : 1);
  for (int v : {c.out_channels, c.kernel, c.stride, c.padding}) w.i32(v);
  for (bool b : {c.bias, c.batchnorm, c.relu, c.gated}) w.u8(b ? 1 : 0);
  w.u8(static_cast<std::uint8_t>(c.pool));
  for (int v : {c.pool_window, c.pool_stride, c.pool_padding}) w.i32(v);
  w.str(c.input);
  w.str(c.add);
}

LayerConfig read_config(Reader& r) {
  LayerConfig c;
  c.name = r.str("layer name");
  c.kind = r.flag("layer kind") ? LayerKind::kDense : LayerKind::kConv;
  c.out_channels = r.i32("out channels");
  c.kernel = r.i32("kernel");
  c.stride = r.i32("stride");
  c.padding = r.i32("padding");
  c.bias = r.flag("bias");
  c.batchnorm = r.flag("batchnorm");
  c.relu = r.flag("relu");
  c.gated = r.flag("gate");
  const auto at = r.offset();
  const std::uint8_t pool = r.u8("pool");
  if (pool > 2) throw FormatError("bad pool kind", at);
  c.pool = static_cast<PoolKind>(pool);
  c.pool_window = r.i32("pool window");
  c.pool_stride = r.i32("pool stride");
  c.pool_padding = r.i32("pool padding");
  c.input = r.str("layer input");
  c.add = r.str("layer add");
  return c;
}

void write_payload(Writer& w, const Checkpoint& c) {
  w.str(c.config_text);
  w.str(c.manifest_id);
  w.i32(c.epoch);
  w.u8(c.restrict_pow2 ? 1 : 0);
  w.f64(c.accuracy);
  w.u64(c.norm.mean.size());
  for (std::size_t i = 0; i < c.norm.mean.size(); ++i) {
    w.f64(c.norm.mean[i]);
    w.f64(c.norm.stddev.at(i));
  }
  const auto& g = c.graph;
  w.str(arch_to_text(g.arch));
  w.u64(g.layers.size());
  for (const auto& l : g.layers) {
    write_config(w, l.cfg);
    w.tensor(l.weight);
    w.tensor(l.bias);
    w.tensor(l.bn_gamma);
    w.tensor(l.bn_beta);
    w.floats(l.bn_stats.running_mean);
    w.floats(l.bn_stats.running_var);
    w.f32(l.bn_stats.momentum);
    w.f32(l.bn_stats.epsilon);
    w.floats(l.channel_scale);
    w.i32(l.gate);
    write_quant(w, l.weight_quant);
    write_quant(w, l.act_quant);
  }
  w.u64(g.gates.size());
  for (const auto& gs : g.gates) {
    w.tensor(gs.mu);
    w.tensor(gs.sigma);
    w.f32(gs.alpha_th);
    w.f32(gs.tau);
  }
}

Checkpoint read_payload(Reader& r) {
  Checkpoint c;
  c.config_text = r.str("config");
  c.manifest_id = r.str("manifest id");
  c.epoch = r.i32("epoch");
  c.restrict_pow2 = r.flag("restrict flag");
  c.accuracy = r.f64("accuracy");
  const std::uint64_t nc = r.u64("normalization");
  if (nc > 64) throw FormatError("too many normalization channels", r.offset() - 8);
  for (std::uint64_t i = 0; i < nc; ++i) {
    c.norm.mean.push_back(r.f64("mean"));
    c.norm.stddev.push_back(r.f64("stddev"));
  }
  auto& g = c.graph;
  const auto arch_at = r.offset();
  const std::string arch_text = r.str("architecture");
  try {
    g.arch = parse_arch(arch_text, "<checkpoint>");
  } catch (const Error& e) {
    throw FormatError(std::string("embedded architecture: ") + e.what(), arch_at);
  }
  const std::uint64_t nl = r.u64("layer count");
  if (nl != g.arch.layers.size()) throw FormatError("layer count differs from architecture", r.offset() - 8);
  for (std::uint64_t i = 0; i < nl; ++i) {
    Layer l;
    l.cfg = read_config(r);
    l.weight = r.tensor("weight");
    l.bias = r.tensor("bias");
    l.bn_gamma = r.tensor("bn gamma");
    l.bn_beta = r.tensor("bn beta");
    l.bn_stats.running_mean = r.floats("running mean");
    l.bn_stats.running_var = r.floats("running var");
    l.bn_stats.momentum = r.f32("bn momentum");
    l.bn_stats.epsilon = r.f32("bn epsilon");
    l.channel_scale = r.floats("channel scale");
    l.gate = r.i32("gate index");
    l.weight_quant = read_quant(r);
    l.act_quant = read_quant(r);
    g.layers.push_back(std::move(l));
  }
  const std::uint64_t ng = r.u64("gate count");
  if (ng > nl) throw FormatError("more gates than layers", r.offset() - 8);
  for (std::uint64_t i = 0; i < ng; ++i) {
    GateState gs;
    gs.mu = r.tensor("gate mu");
    gs.sigma = r.tensor("gate sigma");
    gs.alpha_th = r.f32("alpha_th");
    gs.tau = r.f32("tau");
    g.gates.push_back(std::move(gs));
  }
  if (!r.done()) throw FormatError("trailing bytes in checkpoint payload", r.offset());

  const auto end = r.offset();
  try {
    infer_shapes(g);
    for (const auto& gs : g.gates) gs.validate();
    for (const auto& l : g.layers) {
      const std::size_t c_out = l.out_channels();
      if (!l.weight.defined()) throw StructuralError("layer '" + l.cfg.name + "' has no weight");
      if (l.bias.defined() && l.bias.numel() != c_out) throw DimensionError("bias length of '" + l.cfg.name + "'");
      if (l.cfg.batchnorm && (!l.bn_gamma.defined() || !l.bn_beta.defined() || l.bn_gamma.numel() != c_out ||
                              l.bn_beta.numel() != c_out || l.bn_stats.running_mean.size() != c_out ||
                              l.bn_stats.running_var.size() != c_out)) {
        throw DimensionError("batch-norm parameters of '" + l.cfg.name + "'");
      }
      if (!l.channel_scale.empty() && l.channel_scale.size() != c_out) {
        throw DimensionError("channel scale of '" + l.cfg.name + "'");
      }
      if (l.gate >= static_cast<int>(g.gates.size()) || l.gate < -1) {
        throw StructuralError("gate index of '" + l.cfg.name + "'");
      }
      if (l.gate >= 0 && g.gates[static_cast<std::size_t>(l.gate)].channels() != c_out) {
        throw DimensionError("gate length of '" + l.cfg.name + "'");
      }
      for (const auto* q : {&l.weight_quant, &l.act_quant}) {
        if (*q) (*q)->forward_state(false).validate();
      }
    }
  } catch (const Error& e) {
    throw FormatError(std::string("inconsistent checkpoint: ") + e.what(), end);
  }
  return c;
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  Writer payload;
  write_payload(payload, ckpt);
  auto& p = payload.bytes();
  Writer out;
  for (char ch : kMagic) out.u8(static_cast<std::uint8_t>(ch));
  out.u32(ckpt.version);
  out.u64(p.size());
  auto& o = out.bytes();
  o.insert(o.end(), p.begin(), p.end());
  out.u32(static_cast<std::uint32_t>(crc32(0L, p.data(), static_cast<uInt>(p.size()))));
  return std::move(out.bytes());
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8) throw FormatError("checkpoint truncated reading magic", bytes.size());
  if (std::memcmp(bytes.data(), kMagic, 8) != 0) throw FormatError("not a checkpoint file (bad magic)", 0);
  Reader r(bytes.subspan(8), 8);
  const std::uint32_t version = r.u32("version");
  if (version > kCheckpointVersion) {
    throw VersionError("checkpoint format version " + std::to_string(version) + " is newer than supported version " +
                           std::to_string(kCheckpointVersion),
                       8);
  }
  if (version == 0) throw FormatError("checkpoint format version 0 is invalid", 8);
  const std::uint64_t len = r.u64("payload length");
  if (len > bytes.size() - kHeader || bytes.size() - kHeader - len != 4) {
    if (len <= bytes.size() - kHeader && bytes.size() - kHeader - len > 4) {
      throw FormatError("trailing bytes after checkpoint", kHeader + len + 4);
    }
    throw FormatError("checkpoint truncated: payload of " + std::to_string(len) + " bytes declared", bytes.size());
  }
  const auto payload = bytes.subspan(kHeader, len);
  Reader tail(bytes.subspan(kHeader + len), kHeader + len);
  const std::uint32_t stored = tail.u32("checksum");
  const auto actual = static_cast<std::uint32_t>(crc32(0L, payload.data(), static_cast<uInt>(payload.size())));
  if (stored != actual) throw ChecksumError("checkpoint checksum mismatch", kHeader + len);
  Reader pr(payload, kHeader);
  Checkpoint c = read_payload(pr);
  c.version = version;
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  const auto bytes = encode_checkpoint(ckpt);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  const std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  try {
    return decode_checkpoint(bytes);
  } catch (const VersionError& e) {
    throw VersionError(path.string() + ": " + e.detail(), e.offset());
  } catch (const ChecksumError& e) {
    throw ChecksumError(path.string() + ": " + e.detail(), e.offset());
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.detail(), e.offset());
  }
}

}  // namespace djpq
