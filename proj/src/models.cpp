// Copyright (c) 2026 The libkd Authors
// SPDX-License-Identifier: Apache-2.0

#include "libkd/models.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>

#include "binio.hpp"

namespace libkd {

using json = nlohmann::json;

const char* family_name(Family f) {
  switch (f) {
    case Family::cnn_teacher: return "cnn_teacher";
    case Family::inn_teacher: return "inn_teacher";
    case Family::vit_student: return "vit_student";
  }
  return "?";
}

Family parse_family(const std::string& name) {
  if (name == "cnn_teacher" || name == "cnn") return Family::cnn_teacher;
  if (name == "inn_teacher" || name == "inn") return Family::inn_teacher;
  if (name == "vit_student" || name == "vit") return Family::vit_student;
  throw ConfigError("unknown model family '" + name + "' (expected cnn, inn or vit)");
}

Preset parse_preset(const std::string& name) {
  if (name == "desk") return Preset::desk;
  if (name == "paper") return Preset::paper;
  throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

// ---- ModelSpec ------------------------------------------------------------

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw ConfigError("model spec: " + msg);
}

const char* shortcut_name(nn::Shortcut s) { return s == nn::Shortcut::projection ? "projection" : "zero_pad"; }

nn::Shortcut parse_shortcut(const std::string& s) {
  if (s == "projection") return nn::Shortcut::projection;
  if (s == "zero_pad") return nn::Shortcut::zero_pad;
  throw ConfigError("model spec: unknown shortcut '" + s + "'");
}

}  // namespace

void ModelSpec::validate() const {
  require(num_classes > 0, "num_classes must be positive");
  require(image_size > 0, "image_size must be positive");
  require(in_channels > 0, "in_channels must be positive");
  const bool inn = family == Family::inn_teacher;
  if (is_teacher()) {
    require(!stage_depths.empty(), "stage_depths required for teachers");
    require(std::ranges::all_of(stage_depths, [](std::size_t d) { return d > 0; }), "stage depths must be positive");
    require(strides.size() == stage_depths.size(), "strides must have one entry per stage");
    require(std::ranges::all_of(strides, [](std::size_t s) { return s > 0; }), "strides must be positive");
    require(base_channels > 0 && stem_channels > 0 && expansion > 0, "channel counts must be positive");
    require(kernel_size % 2 == 1, "kernel_size must be odd");
    require(inn == (group_channels > 0), "group_channels is set iff family is inn_teacher");
    require(inn == (reduction_ratio > 0), "reduction_ratio is set iff family is inn_teacher");
    require(patch_size == 0 && embed_dim == 0 && depth == 0 && num_heads == 0 && mlp_ratio == 0.0 &&
                drop_path_rate == 0.0,
            "ViT fields must be unset for teachers");
    if (inn) {
      std::size_t size = image_size;
      for (std::size_t s = 0; s < strides.size(); ++s) {
        require(size % strides[s] == 0, "involution stage " + std::to_string(s + 1) +
                                            " needs its input size divisible by the stride");
        size /= strides[s];
      }
    }
  } else {
    require(stage_depths.empty() && strides.empty() && base_channels == 0 && stem_channels == 0 &&
                expansion == 0 && kernel_size == 0 && group_channels == 0 && reduction_ratio == 0,
            "teacher fields must be unset for the student");
    require(patch_size > 0 && embed_dim > 0 && depth > 0 && num_heads > 0, "ViT sizes must be positive");
    require(image_size % patch_size == 0, "image_size must be divisible by patch_size");
    require(embed_dim % num_heads == 0, "embed_dim must be divisible by num_heads");
    require(mlp_ratio > 0.0, "mlp_ratio must be positive");
    require(drop_path_rate >= 0.0 && drop_path_rate < 1.0, "drop_path_rate must lie in [0, 1)");
  }
}

std::string ModelSpec::to_json() const {
  json j;
  j["family"] = family_name(family);
  j["num_classes"] = num_classes;
  j["image_size"] = image_size;
  j["in_channels"] = in_channels;
  if (is_teacher()) {
    j["stage_depths"] = stage_depths;
    j["strides"] = strides;
    j["base_channels"] = base_channels;
    j["stem_channels"] = stem_channels;
    j["expansion"] = expansion;
    j["kernel_size"] = kernel_size;
    j["shortcut"] = shortcut_name(shortcut);
    if (family == Family::inn_teacher) {
      j["group_channels"] = group_channels;
      j["reduction_ratio"] = reduction_ratio;
    }
  } else {
    j["patch_size"] = patch_size;
    j["embed_dim"] = embed_dim;
    j["depth"] = depth;
    j["num_heads"] = num_heads;
    j["mlp_ratio"] = mlp_ratio;
    j["drop_path_rate"] = drop_path_rate;
  }
  return j.dump();
}

ModelSpec ModelSpec::from_json(const std::string& text) {
  ModelSpec s;
  try {
    const json j = json::parse(text);
    s.family = parse_family(j.at("family").get<std::string>());
    s.num_classes = j.at("num_classes").get<std::size_t>();
    s.image_size = j.at("image_size").get<std::size_t>();
    s.in_channels = j.at("in_channels").get<std::size_t>();
    if (s.is_teacher()) {
      s.stage_depths = j.at("stage_depths").get<std::vector<std::size_t>>();
      s.strides = j.at("strides").get<std::vector<std::size_t>>();
      s.base_channels = j.at("base_channels").get<std::size_t>();
      s.stem_channels = j.at("stem_channels").get<std::size_t>();
      s.expansion = j.at("expansion").get<std::size_t>();
      s.kernel_size = j.at("kernel_size").get<std::size_t>();
      s.shortcut = parse_shortcut(j.at("shortcut").get<std::string>());
      if (s.family == Family::inn_teacher) {
        s.group_channels = j.at("group_channels").get<std::size_t>();
        s.reduction_ratio = j.at("reduction_ratio").get<std::size_t>();
      }
    } else {
      s.patch_size = j.at("patch_size").get<std::size_t>();
      s.embed_dim = j.at("embed_dim").get<std::size_t>();
      s.depth = j.at("depth").get<std::size_t>();
      s.num_heads = j.at("num_heads").get<std::size_t>();
      s.mlp_ratio = j.at("mlp_ratio").get<double>();
      s.drop_path_rate = j.at("drop_path_rate").get<double>();
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("model spec JSON: ") + e.what());
  }
  s.validate();
  return s;
}

ModelSpec preset_spec(Family family, Preset preset) {
  ModelSpec s;
  s.family = family;
  const bool paper = preset == Preset::paper;
  s.num_classes = paper ? 100 : 10;
  s.image_size = paper ? 32 : 16;
  if (family == Family::vit_student) {
    s.patch_size = 4;
    s.embed_dim = paper ? 192 : 32;
    s.depth = paper ? 12 : 2;
    s.num_heads = paper ? 3 : 2;
    s.mlp_ratio = 4.0;
    s.drop_path_rate = 0.1;
    return s;
  }
  s.stage_depths = paper ? std::vector<std::size_t>{1, 2, 4, 1} : std::vector<std::size_t>{1, 1, 1, 1};
  s.strides = {1, 2, 2, 2};
  s.base_channels = paper ? 64 : 8;
  s.stem_channels = s.base_channels;
  s.expansion = 4;
  s.kernel_size = 3;
  // Parameter-free shortcuts put the convolutional teacher at ~9M parameters
  // and projection shortcuts the involutional one at ~7M (paper scale).
  s.shortcut = family == Family::cnn_teacher ? nn::Shortcut::zero_pad : nn::Shortcut::projection;
  if (family == Family::inn_teacher) {
    s.group_channels = paper ? 16 : 4;
    s.reduction_ratio = 4;
  }
  return s;
}

// ---- Model ----------------------------------------------------------------

struct Model::Teacher {
  nn::Conv2d stem;
  nn::BatchNorm2d stem_bn;
  std::vector<std::pair<std::string, nn::Bottleneck>> blocks;
  nn::Linear fc;
};

struct Model::Student {
  nn::PatchEmbed embed;
  Tensor cls_token, dist_token, pos_embed;
  std::vector<nn::TransformerBlock> blocks;
  nn::LayerNorm norm;
  nn::Linear head, head_dist;
};

Model::Model(const ModelSpec& spec, std::uint64_t seed, DType dtype)
    : spec_(spec), store_(std::make_unique<ParamStore>(dtype)) {
  spec_.validate();
  Rng rng(seed);
  ParamStore& store = *store_;
  if (spec_.is_teacher()) {
    auto t = std::make_shared<Teacher>();
    t->stem = nn::Conv2d(store, "stem.conv", spec_.in_channels, spec_.stem_channels, 3, 1, 1, false, rng);
    t->stem_bn = nn::BatchNorm2d(store, "stem.bn", spec_.stem_channels);
    std::size_t in = spec_.stem_channels;
    for (std::size_t s = 0; s < spec_.stage_depths.size(); ++s) {
      for (std::size_t b = 0; b < spec_.stage_depths[s]; ++b) {
        nn::BottleneckConfig cfg;
        cfg.in_channels = in;
        cfg.width = spec_.base_channels << s;
        cfg.expansion = spec_.expansion;
        cfg.stride = b == 0 ? spec_.strides[s] : 1;
        cfg.kernel_size = spec_.kernel_size;
        cfg.shortcut = spec_.shortcut;
        if (spec_.family == Family::inn_teacher) {
          cfg.op = nn::SpatialOp::involution;
          cfg.group_channels = spec_.group_channels;
          cfg.reduction_ratio = spec_.reduction_ratio;
        }
        std::string name = "layer" + std::to_string(s + 1) + "." + std::to_string(b);
        nn::Bottleneck block(store, name, cfg, rng);
        in = block.out_channels();
        t->blocks.emplace_back(std::move(name), std::move(block));
      }
    }
    t->fc = nn::Linear(store, "fc", in, spec_.num_classes, nn::LinearInit::fan_in_uniform, rng);
    teacher_ = std::move(t);
    return;
  }
  auto st = std::make_shared<Student>();
  const std::size_t d = spec_.embed_dim;
  const std::size_t tokens = (spec_.image_size / spec_.patch_size) * (spec_.image_size / spec_.patch_size) + 2;
  st->embed = nn::PatchEmbed(store, "patch_embed", spec_.in_channels, spec_.patch_size, d, rng);
  st->cls_token = store.add("cls_token", Tensor::zeros({1, 1, d}, dtype), ParamKind::no_decay);
  st->dist_token = store.add("dist_token", Tensor::zeros({1, 1, d}, dtype), ParamKind::no_decay);
  Tensor pos = Tensor::zeros({1, tokens, d}, dtype);
  for (std::size_t i = 0; i < pos.numel(); ++i) pos.set(i, rng.trunc_normal(0.02));
  st->pos_embed = store.add("pos_embed", pos, ParamKind::no_decay);
  for (std::size_t i = 0; i < spec_.depth; ++i) {
    // Stochastic depth grows linearly from 0 at the first block to the configured rate at the last.
    const double rate =
        spec_.depth > 1 ? spec_.drop_path_rate * static_cast<double>(i) / static_cast<double>(spec_.depth - 1) : 0.0;
    st->blocks.emplace_back(store, "blocks." + std::to_string(i), d, spec_.num_heads, spec_.mlp_ratio, rate, rng);
  }
  st->norm = nn::LayerNorm(store, "norm", d);
  st->head = nn::Linear(store, "head", d, spec_.num_classes, nn::LinearInit::trunc_normal, rng);
  st->head_dist = nn::Linear(store, "head_dist", d, spec_.num_classes, nn::LinearInit::trunc_normal, rng);
  student_ = std::move(st);
}

void Model::check_input(const Tensor& x) const {
  if (!x.defined() || x.dim() != 4 || x.size(1) != spec_.in_channels || x.size(2) != spec_.image_size ||
      x.size(3) != spec_.image_size) {
    throw DimensionError("model expects [B x " + std::to_string(spec_.in_channels) + " x " +
                         std::to_string(spec_.image_size) + " x " + std::to_string(spec_.image_size) + "], got " +
                         (x.defined() ? shape_str(x.shape()) : std::string("undefined")));
  }
  if (x.dtype() != dtype()) {
    throw DimensionError(std::string("model is ") + dtype_name(dtype()) + " but input is " + dtype_name(x.dtype()));
  }
}

namespace {

Tensor flatten(const Tensor& t) { return reshape(t, {t.size(0), t.numel() / t.size(0)}); }

}  // namespace

Tensor Model::teacher_forward(const Tensor& x, const ForwardContext& ctx,
                              std::vector<NamedActivation>* acts) const {
  const Teacher& t = *teacher_;
  Tensor h = relu(t.stem_bn.forward(t.stem.forward(x), ctx.training));
  if (acts) acts->push_back({"stem", flatten(h)});
  for (const auto& [name, block] : t.blocks) {
    h = block.forward(h, ctx);
    if (acts) acts->push_back({name, flatten(h)});
  }
  return t.fc.forward(global_avg_pool(h));
}

HeadLogits Model::student_forward(const Tensor& x, const ForwardContext& ctx,
                                  std::vector<NamedActivation>* acts) const {
  const Student& s = *student_;
  const std::size_t B = x.size(0), d = spec_.embed_dim;
  Tensor patches = s.embed.forward(x);
  Tensor h = concat({broadcast_batch(s.cls_token, B), broadcast_batch(s.dist_token, B), patches}, 1);
  h = add(h, broadcast_batch(s.pos_embed, B));
  if (acts) acts->push_back({"embed", flatten(h)});
  for (std::size_t i = 0; i < s.blocks.size(); ++i) {
    h = s.blocks[i].forward(h, ctx);
    if (acts) acts->push_back({"blocks." + std::to_string(i), flatten(h)});
  }
  h = s.norm.forward(h);
  HeadLogits out;
  out.cls = s.head.forward(reshape(slice(h, 1, 0, 1), {B, d}));
  out.dist = s.head_dist.forward(reshape(slice(h, 1, 1, 1), {B, d}));
  return out;
}

HeadLogits Model::forward_heads(const Tensor& x, const ForwardContext& ctx) const {
  check_input(x);
  if (teacher_) return {teacher_forward(x, ctx, nullptr), Tensor()};
  return student_forward(x, ctx, nullptr);
}

namespace {

// log(0.5 softmax(a) + 0.5 softmax(b)) row by row, outside the tape.
Tensor two_head_log_probs(const Tensor& a, const Tensor& b) {
  const std::size_t B = a.size(0), C = a.size(1);
  Tensor out = Tensor::zeros({B, C}, a.dtype());
  std::vector<double> pa(C), pb(C);
  auto probs = [&](const Tensor& z, std::size_t r, std::vector<double>& p) {
    double mx = -INFINITY;
    for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, z.at(r * C + c));
    double s = 0.0;
    for (std::size_t c = 0; c < C; ++c) s += p[c] = std::exp(z.at(r * C + c) - mx);
    for (double& v : p) v /= s;
  };
  for (std::size_t r = 0; r < B; ++r) {
    probs(a, r, pa);
    probs(b, r, pb);
    for (std::size_t c = 0; c < C; ++c) out.set(r * C + c, std::log(0.5 * pa[c] + 0.5 * pb[c]));
  }
  return out;
}

}  // namespace

Tensor Model::forward(const Tensor& x, const ForwardContext& ctx) const {
  HeadLogits h = forward_heads(x, ctx);
  if (!h.dist.defined()) return h.cls;
  return two_head_log_probs(h.cls, h.dist);
}

std::pair<Tensor, std::vector<NamedActivation>> Model::forward_with_activations(const Tensor& x) const {
  check_input(x);
  std::vector<NamedActivation> acts;
  if (teacher_) {
    Tensor logits = teacher_forward(x, {}, &acts);
    return {logits, std::move(acts)};
  }
  HeadLogits h = student_forward(x, {}, &acts);
  return {two_head_log_probs(h.cls, h.dist), std::move(acts)};
}

std::vector<std::string> Model::block_names() const {
  std::vector<std::string> names;
  if (teacher_) {
    names.emplace_back("stem");
    for (const auto& [name, block] : teacher_->blocks) names.push_back(name);
  } else {
    names.emplace_back("embed");
    for (std::size_t i = 0; i < student_->blocks.size(); ++i) names.push_back("blocks." + std::to_string(i));
  }
  return names;
}

void Model::load_state(const Model& other) {
  if (!(other.spec_ == spec_)) throw ConfigError("load_state: model specs differ");
  for (const Param& p : store_->items()) {
    const Param* src = other.params().find(p.name);
    if (!src || src->value.shape() != p.value.shape()) {
      throw ConfigError("load_state: no matching tensor for '" + p.name + "'");
    }
    Tensor dst = p.value;
    for (std::size_t i = 0; i < dst.numel(); ++i) dst.set(i, src->value.at(i));
  }
}

Model Model::clone() const { return to(dtype()); }

Model Model::to(DType dt) const {
  Model m(spec_, 0, dt);
  m.load_state(*this);
  return m;
}

Model build_cnn_teacher(const ModelSpec& spec, std::uint64_t seed, DType dtype) {
  if (spec.family != Family::cnn_teacher) throw ConfigError("build_cnn_teacher: spec family is not cnn_teacher");
  return Model(spec, seed, dtype);
}

Model build_inn_teacher(const ModelSpec& spec, std::uint64_t seed, DType dtype) {
  if (spec.family != Family::inn_teacher) throw ConfigError("build_inn_teacher: spec family is not inn_teacher");
  return Model(spec, seed, dtype);
}

Model build_vit_student(const ModelSpec& spec, std::uint64_t seed, DType dtype) {
  if (spec.family != Family::vit_student) throw ConfigError("build_vit_student: spec family is not vit_student");
  return Model(spec, seed, dtype);
}

// ---- checkpoints ----------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'L', 'K', 'D', 'M'};

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(const Model& m) {
  binio::Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  const std::string spec = m.spec().to_json();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(spec.size()));
  w.put_string(spec);
  for (const Param& p : m.params().items()) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(p.name.size()));
    w.put_string(p.name);
    w.put<std::uint8_t>(static_cast<std::uint8_t>(p.value.dim()));
    for (std::size_t d : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    if (p.value.dtype() == DType::f32) {
      auto data = p.value.data<float>();
      w.put_bytes(data.data(), data.size() * sizeof(float));
    } else {
      for (double v : p.value.data<double>()) w.put<float>(static_cast<float>(v));
    }
  }
  w.put_crc();
  return std::move(w.bytes());
}

Model deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  const std::string what = "checkpoint";
  binio::Reader r(bytes.data(), bytes.size(), what);
  if (bytes.size() < 8 || std::memcmp(r.take(4), kMagic, 4) != 0) {
    throw FormatError("checkpoint: missing LKDM magic");
  }
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint: version " + std::to_string(version) + " (supported: " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  binio::verify_footer_crc(bytes, what);
  binio::Reader body(bytes.data(), bytes.size() - 4, what);
  body.take(8);
  const auto spec_len = body.get<std::uint32_t>();
  Model m(ModelSpec::from_json(body.get_string(spec_len)), 0, DType::f32);
  std::vector<bool> seen(m.params().items().size(), false);
  std::size_t loaded = 0;
  while (body.remaining() > 0) {
    const auto name_len = body.get<std::uint16_t>();
    const std::string name = body.get_string(name_len);
    const Param* p = m.params().find(name);
    if (!p) throw CorruptionError("checkpoint: unexpected tensor '" + name + "'");
    const auto index = static_cast<std::size_t>(p - m.params().items().data());
    if (seen[index]) throw CorruptionError("checkpoint: tensor '" + name + "' stored twice");
    seen[index] = true;
    const auto ndim = body.get<std::uint8_t>();
    Shape shape(ndim);
    for (auto& d : shape) d = body.get<std::uint32_t>();
    if (shape != p->value.shape()) {
      throw CorruptionError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                            shape_str(p->value.shape()));
    }
    Tensor dst = p->value;
    auto out = dst.mutable_data<float>();
    std::memcpy(out.data(), body.take(out.size() * sizeof(float)), out.size() * sizeof(float));
    ++loaded;
  }
  if (loaded != m.params().items().size()) {
    throw CorruptionError("checkpoint: " + std::to_string(loaded) + " tensors present, model has " +
                          std::to_string(m.params().items().size()));
  }
  return m;
}

void save_checkpoint(const Model& m, const std::filesystem::path& path) {
  binio::write_file(path, serialize_checkpoint(m));
}

Model load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(binio::read_file(path));
}

std::uint32_t checkpoint_crc(const Model& m) {
  const auto bytes = serialize_checkpoint(m);
  std::uint32_t crc;
  std::memcpy(&crc, bytes.data() + bytes.size() - 4, 4);
  return crc;
}

}  // namespace libkd
