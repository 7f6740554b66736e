#include <map>

#include "djpq/config.hpp"
#include "djpq/errors.hpp"

namespace djpq {

namespace {

const char* kLayerKeys =
    "name, kind, out, kernel, stride, padding, bias, batchnorm, relu, gate, pool, pool_window, pool_stride, "
    "pool_padding, input, add";

int positive_int(const std::string& v, const std::string& field, long long lo = 1) {
  const long long x = parse_int(v, field);
  if (x < lo || x > 1000000) {
    throw ConfigError("field '" + field + "': " + v + " outside [" + std::to_string(lo) + ", 1000000]");
  }
  return static_cast<int>(x);
}

void set_layer_key(LayerConfig& l, const IniEntry& e) {
  const std::string& v = e.value;
  if (e.key == "name") l.name = v;
  else if (e.key == "kind") {
    if (v == "conv") l.kind = LayerKind::kConv;
    else if (v == "dense") l.kind = LayerKind::kDense;
    else throw ConfigError("field 'kind': '" + v + "' is not one of conv, dense");
  } else if (e.key == "out") l.out_channels = positive_int(v, "out");
  else if (e.key == "kernel") l.kernel = positive_int(v, "kernel");
  else if (e.key == "stride") l.stride = positive_int(v, "stride");
  else if (e.key == "padding") l.padding = positive_int(v, "padding", 0);
  else if (e.key == "bias") l.bias = parse_bool(v, "bias");
  else if (e.key == "batchnorm") l.batchnorm = parse_bool(v, "batchnorm");
  else if (e.key == "relu") l.relu = parse_bool(v, "relu");
  else if (e.key == "gate") l.gated = parse_bool(v, "gate");
  else if (e.key == "pool") {
    if (v == "none") l.pool = PoolKind::kNone;
    else if (v == "max") l.pool = PoolKind::kMax;
    else if (v == "avg") l.pool = PoolKind::kGlobalAvg;
    else throw ConfigError("field 'pool': '" + v + "' is not one of none, max, avg");
  } else if (e.key == "pool_window") l.pool_window = positive_int(v, "pool_window");
  else if (e.key == "pool_stride") l.pool_stride = positive_int(v, "pool_stride");
  else if (e.key == "pool_padding") l.pool_padding = positive_int(v, "pool_padding", 0);
  else if (e.key == "input") l.input = v;
  else if (e.key == "add") l.add = v;
  else throw ConfigError("unknown key '" + e.key + "' in [layer] (valid keys: " + kLayerKeys + ")");
}

void parse_input_shape(ArchSpec& a, const std::string& v) {
  std::vector<int> dims;
  std::size_t start = 0;
  while (true) {
    const std::size_t x = v.find('x', start);
    dims.push_back(positive_int(v.substr(start, x == std::string::npos ? std::string::npos : x - start), "input"));
    if (x == std::string::npos) break;
    start = x + 1;
  }
  if (dims.size() != 3) throw ConfigError("field 'input': expected CxHxW, got '" + v + "'");
  a.in_channels = dims[0];
  a.in_height = dims[1];
  a.in_width = dims[2];
}

}  // namespace

ArchSpec parse_arch(std::string_view text, const std::string& source) {
  const IniDocument doc = parse_ini(text, source);
  ArchSpec a;
  bool have_network = false, have_input = false;
  int layer_block = -1;
  std::map<std::string, int> keys_in_section;
  for (const auto& e : doc.entries) {
    const std::string where = source + ":" + std::to_string(e.line) + ": ";
    try {
      if (e.section == "network") {
        if (!a.layers.empty()) throw ConfigError("[network] must precede the [layer] sections");
        have_network = true;
        if (e.key == "name") a.name = e.value;
        else if (e.key == "input") {
          parse_input_shape(a, e.value);
          have_input = true;
        } else if (e.key == "input_bits") a.input_bits = positive_int(e.value, "input_bits");
        else throw ConfigError("unknown key '" + e.key + "' in [network] (valid keys: name, input, input_bits)");
      } else if (e.section == "layer") {
        if (e.block != layer_block) {
          a.layers.emplace_back();
          keys_in_section.clear();
          layer_block = e.block;
        }
        if (keys_in_section[e.key]++) throw ConfigError("duplicate key '" + e.key + "'");
        set_layer_key(a.layers.back(), e);
      } else {
        throw ConfigError("unknown section [" + e.section + "] (valid: network, layer)");
      }
    } catch (const ConfigError& err) {
      throw ConfigError(where + err.what());
    }
  }
  if (!have_network || !have_input) throw ConfigError(source + ": missing [network] section with 'input = CxHxW'");
  if (a.layers.empty()) throw ConfigError(source + ": no [layer] sections");
  for (const auto& l : a.layers) {
    if (l.name.empty()) throw ConfigError(source + ": a [layer] section has no 'name'");
    if (l.out_channels < 1) throw ConfigError(source + ": layer '" + l.name + "' has no 'out'");
  }
  try {
    baseline_graph(a);
  } catch (const StructuralError& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return a;
}

ArchSpec load_arch(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw ConfigError("architecture file not found: " + path.string());
  return parse_arch(read_text_file(path), path.string());
}

std::string arch_to_text(const ArchSpec& a) {
  std::string out = "[network]\nname = " + a.name + "\ninput = " + std::to_string(a.in_channels) + "x" +
                    std::to_string(a.in_height) + "x" + std::to_string(a.in_width) +
                    "\ninput_bits = " + std::to_string(a.input_bits) + "\n";
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  for (const auto& l : a.layers) {
    out += "\n[layer]\nname = " + l.name + "\nkind = " + (l.kind == LayerKind::kConv ? "conv" : "dense") +
           "\nout = " + std::to_string(l.out_channels) + "\nkernel = " + std::to_string(l.kernel) +
           "\nstride = " + std::to_string(l.stride) + "\npadding = " + std::to_string(l.padding) +
           "\nbias = " + b(l.bias) + "\nbatchnorm = " + b(l.batchnorm) + "\nrelu = " + b(l.relu) +
           "\ngate = " + b(l.gated) + "\npool = " +
           (l.pool == PoolKind::kNone ? "none" : l.pool == PoolKind::kMax ? "max" : "avg") +
           "\npool_window = " + std::to_string(l.pool_window) + "\npool_stride = " + std::to_string(l.pool_stride) +
           "\npool_padding = " + std::to_string(l.pool_padding) + "\n";
    if (!l.input.empty()) out += "input = " + l.input + "\n";
    if (!l.add.empty()) out += "add = " + l.add + "\n";
  }
  return out;
}

}  // namespace djpq
