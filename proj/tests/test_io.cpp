#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "djpq/checkpoint.hpp"
#include "djpq/config.hpp"
#include "djpq/dataset.hpp"
#include "djpq/errors.hpp"
#include "djpq/report_io.hpp"
#include "djpq/workbench.hpp"

namespace fs = std::filesystem;
using namespace djpq;

namespace {

std::string source(const std::string& rel) { return std::string(DJPQ_SOURCE_DIR) + "/" + rel; }

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("djpq_io_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void put_be32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<std::uint8_t>(v >> s));
}

std::vector<std::uint8_t> idx_images(std::uint32_t n, std::uint32_t h, std::uint32_t w) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x803);
  put_be32(b, n);
  put_be32(b, h);
  put_be32(b, w);
  for (std::uint32_t i = 0; i < n * h * w; ++i) b.push_back(static_cast<std::uint8_t>(i % 251));
  return b;
}

std::vector<std::uint8_t> idx_labels(std::vector<std::uint8_t> labels) {
  std::vector<std::uint8_t> b;
  put_be32(b, 0x801);
  put_be32(b, static_cast<std::uint32_t>(labels.size()));
  b.insert(b.end(), labels.begin(), labels.end());
  return b;
}

template <class F>
std::size_t format_offset(F&& fn) {
  try {
    fn();
  } catch (const FormatError& e) {
    return e.offset();
  }
  ADD_FAILURE() << "no FormatError";
  return 0;
}

Checkpoint sample_checkpoint() {
  const ArchSpec arch = load_arch(source("arch/vgg_mini.arch"));
  std::mt19937_64 rng(7);
  Checkpoint c;
  c.graph = build_network(arch, rng);
  attach_gates(c.graph, GateInit{});
  Tensor calib({4, 1, 28, 28}, 0.5f);
  attach_quantizers(c.graph, QuantInit{}, calib);
  c.graph.layers[1].weight_quant->freeze(false);
  c.config_text = config_to_text(preset_config("mini"));
  c.norm = {{0.13}, {0.31}};
  c.epoch = 3;
  c.accuracy = 0.875;
  c.manifest_id = "abc";
  return c;
}

CompressionReport sample_report() {
  std::vector<LayerRecord> rows{{"conv1", 4, 5, 0.25, 0.25, 1000.5, 1000.5 * 4 * 8},
                                {"fc", 3, 32, 0.0, 0.25, 200, 200 * 3 * 5}};
  auto r = assemble_report(rows, {5000, 5000 * 1024.0}, 0.9731);
  r.manifest_id = "0123456789abcdef";
  return r;
}

}  // namespace

TEST(Config, PresetFileParses) {
  const auto c = load_config(source("configs/mini_djpq.cfg"));
  EXPECT_EQ(c.preset, "mini");
  EXPECT_EQ(c.mode, TrainMode::kDjpq);
  EXPECT_EQ(c.seed, 1u);
  EXPECT_EQ(c.gamma, preset_config("mini").gamma);
}

TEST(Config, UnknownKeyListsValidKeys) {
  try {
    parse_config("[run]\npreset = vgg7\n[djpq]\nlearning_rate = 0.1\n", "x.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("x.cfg:4"), std::string::npos) << m;
    EXPECT_NE(m.find("learning_rate"), std::string::npos);
    EXPECT_NE(m.find("gamma, beta, lr"), std::string::npos);
  }
}

TEST(Config, EmptyFileWithoutPresetIsRejected) {
  try {
    parse_config("", "empty.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("gamma"), std::string::npos);
    EXPECT_NE(m.find("beta"), std::string::npos);
    EXPECT_NE(m.find("lr"), std::string::npos);
  }
}

TEST(Config, ExplicitValuesWithoutPreset) {
  const auto c = parse_config("[djpq]\ngamma = 0\nbeta = 1e-9\nlr = 0.1\n");
  EXPECT_EQ(c.gamma, 0.0);
  EXPECT_EQ(c.beta, 1e-9);
  EXPECT_EQ(c.lr, 0.1);
}

TEST(Config, BadValuesNameTheField) {
  try {
    parse_config("[run]\npreset = vgg7\n[djpq]\nlr = fast\n", "c");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("lr"), std::string::npos);
  }
  EXPECT_THROW(parse_config("[run]\npreset = vgg7\nmode = turbo\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\npreset = vgg7\n[djpq]\nlr = -1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\npreset = vgg7\n[bogus]\nx = 1\n"), ConfigError);
  EXPECT_THROW(parse_config("[run]\npreset = vgg7\nseed = 1\nseed = 2\n"), ConfigError);
  EXPECT_THROW(parse_config("[run\n"), ConfigError);
}

TEST(Config, TextRoundTrip) {
  for (const auto& name : preset_names()) {
    auto c = preset_config(name);
    c.seed = 42;
    c.arch = "a.arch";
    c.gamma_anneal = 0.9;
    if (c.mode == TrainMode::kTwoStage) c.stage2_quant = StageTwoQuant::kFixed8;
    const auto text = config_to_text(c);
    const auto back = parse_config(text);
    EXPECT_EQ(config_to_text(back), text) << name;
    EXPECT_EQ(back.gamma, c.gamma);
    EXPECT_EQ(back.stage2_lr, c.stage2_lr);
  }
}

TEST(Config, MissingFileNamesThePath) {
  try {
    load_config("/nonexistent/run.cfg");
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/run.cfg"), std::string::npos);
  }
}

TEST(ArchFile, RoundTripForBundledFiles) {
  for (const char* name : {"vgg7.arch", "vgg_mini.arch", "resnet18.arch"}) {
    const ArchSpec a = load_arch(source(std::string("arch/") + name));
    EXPECT_EQ(parse_arch(arch_to_text(a)), a) << name;
  }
}

TEST(ArchFile, Errors) {
  EXPECT_THROW(parse_arch("[network]\nname = x\ninput = 1x4\n"), ConfigError);
  EXPECT_THROW(parse_arch("[network]\nname = x\ninput = 1x4x4\n"), ConfigError);
  EXPECT_THROW(parse_arch("[network]\nname = x\ninput = 1x4x4\n[layer]\nname = a\nkind = pool\nout = 2\n"),
               ConfigError);
  EXPECT_THROW(load_arch("/nonexistent.arch"), ConfigError);
}

TEST(Idx, ParsesImagesAndLabels) {
  Dataset d;
  parse_idx_images(idx_images(3, 2, 2), d);
  parse_idx_labels(idx_labels({1, 0, 9}), d);
  EXPECT_EQ(d.size(), 3u);
  EXPECT_EQ(d.sample_shape(), (Shape{1, 2, 2}));
  EXPECT_EQ(d.pixels[5], 5);
  EXPECT_EQ(d.labels[2], 9);
}

TEST(Idx, ErrorsCarryByteOffsets) {
  Dataset d;
  auto bad_magic = idx_images(1, 2, 2);
  bad_magic[3] = 0x01;
  EXPECT_EQ(format_offset([&] { parse_idx_images(bad_magic, d); }), 0u);
  auto truncated = idx_images(3, 2, 2);
  truncated.resize(16 + 4 + 2);
  EXPECT_EQ(format_offset([&] { parse_idx_images(truncated, d); }), 20u);
  EXPECT_EQ(format_offset([&] { parse_idx_labels(idx_labels({1, 12, 3}), d); }), 9u);
  EXPECT_EQ(format_offset([&] { parse_idx_images(std::vector<std::uint8_t>(10), d); }), 10u);
}

TEST(Cifar, ParsesRecordsAndReportsOffsets) {
  std::vector<std::uint8_t> b;
  for (int r = 0; r < 2; ++r) {
    b.push_back(static_cast<std::uint8_t>(r + 3));
    for (int i = 0; i < 3072; ++i) b.push_back(static_cast<std::uint8_t>((i + r) % 256));
  }
  Dataset d;
  parse_cifar10(b, d);
  EXPECT_EQ(d.size(), 2u);
  EXPECT_EQ(d.sample_shape(), (Shape{3, 32, 32}));
  EXPECT_EQ(d.labels, (std::vector<int>{3, 4}));
  EXPECT_EQ(d.pixels[3072], 1);

  auto bad = b;
  bad[3073] = 10;
  Dataset e;
  EXPECT_EQ(format_offset([&] { parse_cifar10(bad, e, 30730); }), 30730u + 3073u);
  auto cut = b;
  cut.resize(3073 + 100);
  Dataset f;
  EXPECT_EQ(format_offset([&] { parse_cifar10(cut, f); }), 3073u);
}

TEST(Dataset, BundledSubsetLoads) {
  const auto dir = source("data/mnist5k");
  ASSERT_EQ(detect_format(dir), DatasetFormat::kMnistIdx);
  const DataSplits s = load_splits(dir, DatasetFormat::kMnistIdx);
  EXPECT_EQ(s.train.size(), 4000u);
  EXPECT_EQ(s.test.size(), 1000u);
  EXPECT_EQ(s.test.norm, s.train.norm);
  EXPECT_NEAR(s.train.norm.mean[0], 0.13, 0.02);
  EXPECT_FALSE(s.train.fingerprint.empty());
  const std::vector<std::size_t> idx{0, 1};
  const Tensor x = s.train.images(idx);
  EXPECT_EQ(x.shape(), (Shape{2, 1, 28, 28}));
  const double m = s.train.norm.mean[0], sd = s.train.norm.stddev[0];
  EXPECT_NEAR(x.data()[100], (s.train.pixels[100] / 255.0 - m) / sd, 1e-5);
  EXPECT_THROW(detect_format("/nonexistent"), DataError);
}

TEST(Dataset, ContentHashIsFnv1a) {
  EXPECT_EQ(content_hash({}), "cbf29ce484222325");
  const std::vector<std::uint8_t> a{'a'};
  EXPECT_EQ(content_hash(a), "af63dc4c8601ec8c");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const fs::path dir = scratch("ckpt");
  const Checkpoint c = sample_checkpoint();
  save_checkpoint(c, dir / "a.ckpt");
  const Checkpoint back = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(back, dir / "b.ckpt");
  std::ifstream a(dir / "a.ckpt", std::ios::binary), b(dir / "b.ckpt", std::ios::binary);
  const std::string sa((std::istreambuf_iterator<char>(a)), {}), sb((std::istreambuf_iterator<char>(b)), {});
  EXPECT_EQ(sa, sb);
  EXPECT_EQ(back.config_text, c.config_text);
  EXPECT_EQ(back.norm, c.norm);
  EXPECT_EQ(back.accuracy, c.accuracy);
  EXPECT_EQ(back.graph.arch, c.graph.arch);
  EXPECT_FALSE(back.graph.layers[1].weight_quant->trainable());
  EXPECT_EQ(back.graph.layers[0].act_quant->state().d, c.graph.layers[0].act_quant->state().d);
  fs::remove_all(dir);
}

TEST(Checkpoint, CorruptionIsDetected) {
  const auto bytes = encode_checkpoint(sample_checkpoint());
  auto flipped = bytes;
  flipped[flipped.size() / 2] ^= 0x10;
  EXPECT_THROW(decode_checkpoint(flipped), ChecksumError);
  auto newer = bytes;
  newer[8] = 2;
  try {
    decode_checkpoint(newer);
    FAIL();
  } catch (const VersionError& e) {
    EXPECT_EQ(e.offset(), 8u);
    EXPECT_NE(std::string(e.what()).find("version 2"), std::string::npos);
  }
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_EQ(format_offset([&] { decode_checkpoint(magic); }), 0u);
  auto cut = bytes;
  cut.resize(cut.size() - 10);
  EXPECT_THROW(decode_checkpoint(cut), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent.ckpt"), Error);
}

TEST(Report, JsonRoundTrip) {
  const auto r = sample_report();
  const auto text = report_to_json(r);
  EXPECT_EQ(report_from_json(text), r);
  EXPECT_NE(text.find(kReportSchema), std::string::npos);
  EXPECT_NE(text.find("\"P_l\""), std::string::npos);
  EXPECT_THROW(report_from_json("{"), FormatError);
  EXPECT_THROW(report_from_json("{\"schema\": \"other\"}"), FormatError);
}

TEST(Report, TotalsAreSumsOfRows) {
  const auto r = sample_report();
  EXPECT_EQ(r.totals.macs, 1200.5);
  EXPECT_EQ(r.totals.bops, 1000.5 * 32 + 3000);
}

TEST(Report, CsvHasHeaderRowsAndTotal) {
  const auto csv = report_to_csv(sample_report());
  std::vector<std::string> lines;
  std::size_t start = 0;
  for (std::size_t i = csv.find('\n'); i != std::string::npos; start = i + 1, i = csv.find('\n', start)) {
    lines.push_back(csv.substr(start, i - start));
  }
  ASSERT_EQ(lines.size(), 4u);
  EXPECT_EQ(lines[0], "layer-id,b_w,b_a,p_l,P_l,MACs,BOPs");
  EXPECT_EQ(lines[1].rfind("conv1,", 0), 0u);
  EXPECT_EQ(lines[3].rfind("total,", 0), 0u);
}

TEST(Report, ResNetStyleDisplayValue) {
  CompressionReport r;
  r.totals = {1.81e9, 1.81e9 * 1024};
  r.baseline = r.totals;
  EXPECT_NE(report_to_json(r).find("\"1853.44\""), std::string::npos);
}

TEST(Report, EmitFailureNamesThePath) {
  try {
    emit_report(sample_report(), ReportFormat::kJson, "/nonexistent/dir/report.json");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/report.json"), std::string::npos);
  }
  EXPECT_THROW(parse_report_format("xml"), ConfigError);
}

TEST(Manifest, IdDependsOnInputsOnly) {
  const auto a = manifest_id("cfg", "fp", 1);
  EXPECT_EQ(a, manifest_id("cfg", "fp", 1));
  EXPECT_NE(a, manifest_id("cfg", "fp", 2));
  EXPECT_NE(a, manifest_id("cfg2", "fp", 1));
  EXPECT_NE(a, manifest_id("cfg", "fp2", 1));
}

TEST(Workbench, OutDirFollowsEnvironment) {
  ::setenv("DJPQ_OUT_DIR", "/tmp/somewhere", 1);
  EXPECT_EQ(default_out_dir(), fs::path("/tmp/somewhere"));
  ::unsetenv("DJPQ_OUT_DIR");
  EXPECT_EQ(default_out_dir(), fs::path("djpq-out"));
}

TEST(Workbench, ArchPathIsRelativeToConfig) {
  TrainConfig c;
  c.arch = "../arch/vgg_mini.arch";
  EXPECT_EQ(resolve_arch_path(c, "/x/configs/run.cfg").lexically_normal(), fs::path("/x/arch/vgg_mini.arch"));
  c.arch = "/abs/a.arch";
  EXPECT_EQ(resolve_arch_path(c, "/x/configs/run.cfg"), fs::path("/abs/a.arch"));
}
