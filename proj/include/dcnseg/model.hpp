#pragma once

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcnseg/nn/ops.hpp"

namespace dcnseg {

/// Architecture hyper-parameters. The defaults follow the reference design:
/// three dilated dense blocks of 3/4/5 layers with dilation ladders
/// (1,1,2), (1,1,2,4), (1,1,2,4,8), growth rate 8, compression 0.5.
struct ModelConfig {
  int stem_channels = 16;
  int growth_rate = 8;
  std::array<int, 3> ddb_layers = {3, 4, 5};
  std::vector<std::vector<int>> ddb_dilations = {{1, 1, 2}, {1, 1, 2, 4}, {1, 1, 2, 4, 8}};
  int decoder_layers_per_block = 3;
  int decoder_up_channels = 32;
  double dropout_rate = 0.0;
  enum class HeadMode { kIndependent, kJoint3 } head_mode = HeadMode::kIndependent;
  std::uint64_t seed = 1;

  void validate() const {
    if (stem_channels < 1 || growth_rate < 1 || decoder_layers_per_block < 1 ||
        decoder_up_channels < 1)
      throw ConfigError("model: channel and layer counts must be positive");
    if (ddb_dilations.size() != 3) throw ConfigError("model: expected 3 dilation ladders");
    for (int i = 0; i < 3; ++i) {
      const auto& d = ddb_dilations[size_t(i)];
      if (int(d.size()) != ddb_layers[size_t(i)])
        throw ConfigError("model: dilation ladder " + std::to_string(i) +
                          " does not match layer count");
      for (size_t k = 0; k < d.size(); ++k) {
        if (d[k] < 1) throw ConfigError("model: dilation rates must be >= 1");
        if (k > 0 && d[k] < d[k - 1])
          throw ConfigError("model: dilation rates must be nondecreasing");
        if (k >= 2 && (d[k] & (d[k] - 1)) != 0)
          throw ConfigError("model: dilation rates after the first two must be powers of two");
      }
    }
    if (dropout_rate < 0 || dropout_rate >= 1)
      throw ConfigError("model: dropout_rate must be in [0, 1)");
  }

  int max_dilation() const {
    int m = 1;
    for (const auto& d : ddb_dilations)
      for (int r : d) m = std::max(m, r);
    return m;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["stem_channels"] = stem_channels;
    j["growth_rate"] = growth_rate;
    j["ddb_layers"] = ddb_layers;
    j["ddb_dilations"] = ddb_dilations;
    j["decoder_layers_per_block"] = decoder_layers_per_block;
    j["decoder_up_channels"] = decoder_up_channels;
    j["dropout_rate"] = dropout_rate;
    j["head_mode"] = head_mode == HeadMode::kJoint3 ? "joint3" : "independent";
    j["seed"] = seed;
    return j;
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("stem_channels")) c.stem_channels = j.at("stem_channels").get<int>();
    if (j.contains("growth_rate")) c.growth_rate = j.at("growth_rate").get<int>();
    if (j.contains("ddb_layers")) {
      auto v = j.at("ddb_layers").get<std::vector<int>>();
      if (v.size() != 3) throw ConfigError("model: ddb_layers must have 3 entries");
      std::copy(v.begin(), v.end(), c.ddb_layers.begin());
    }
    if (j.contains("ddb_dilations"))
      c.ddb_dilations = j.at("ddb_dilations").get<std::vector<std::vector<int>>>();
    if (j.contains("decoder_layers_per_block"))
      c.decoder_layers_per_block = j.at("decoder_layers_per_block").get<int>();
    if (j.contains("decoder_up_channels"))
      c.decoder_up_channels = j.at("decoder_up_channels").get<int>();
    if (j.contains("dropout_rate")) c.dropout_rate = j.at("dropout_rate").get<double>();
    if (j.contains("head_mode"))
      c.head_mode = j.at("head_mode").get<std::string>() == "joint3" ? HeadMode::kJoint3
                                                                     : HeadMode::kIndependent;
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
    c.validate();
    return c;
  }
};

namespace nn {

/// Registers parameters in a stable order and hands out He-initialized convs.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed) : rng_(seed) {}

  Parameter* conv_weight(const std::string& name, int taps, int cin, int cout) {
    auto p = std::make_unique<Parameter>(name, Shape5{1, 1, taps, cin, cout});
    const double std_dev = std::sqrt(2.0 / (double(taps) * cin));
    for (auto& v : p->value.v) v = float(rng_.normal(0.0, std_dev));
    return keep(std::move(p), /*buffer=*/false);
  }

  Parameter* zeros(const std::string& name, int c) {
    return keep(std::make_unique<Parameter>(name, Shape5{1, 1, 1, 1, c}), false);
  }

  Parameter* constant(const std::string& name, int c, float value) {
    auto p = std::make_unique<Parameter>(name, Shape5{1, 1, 1, 1, c});
    std::fill(p->value.v.begin(), p->value.v.end(), value);
    return keep(std::move(p), false);
  }

  Parameter* buffer(const std::string& name, int c, float value) {
    auto p = std::make_unique<Parameter>(name, Shape5{1, 1, 1, 1, c}, /*train=*/false);
    std::fill(p->value.v.begin(), p->value.v.end(), value);
    return keep(std::move(p), true);
  }

  std::vector<Parameter*>& trainable() { return trainable_; }
  std::vector<Parameter*>& buffers() { return buffers_; }

 private:
  Parameter* keep(std::unique_ptr<Parameter> p, bool buffer) {
    Parameter* raw = p.get();
    owned_.push_back(std::move(p));
    (buffer ? buffers_ : trainable_).push_back(raw);
    return raw;
  }

  Rng rng_;
  std::vector<std::unique_ptr<Parameter>> owned_;
  std::vector<Parameter*> trainable_;
  std::vector<Parameter*> buffers_;
};

/// BN -> ReLU -> 3x3x3 dilated conv producing `growth` channels.
struct DenseLayer {
  Parameter *bn_g, *bn_b, *bn_rm, *bn_rv, *w, *b;
  int dilation = 1;

  static DenseLayer make(ParamStore& ps, const std::string& name, int cin, int growth,
                         int dilation) {
    DenseLayer l;
    l.bn_g = ps.constant(name + ".bn_g", cin, 1.f);
    l.bn_b = ps.zeros(name + ".bn_b", cin);
    l.bn_rm = ps.buffer(name + ".bn_rm", cin, 0.f);
    l.bn_rv = ps.buffer(name + ".bn_rv", cin, 1.f);
    l.w = ps.conv_weight(name + ".w", 27, cin, growth);
    l.b = ps.zeros(name + ".b", growth);
    l.dilation = dilation;
    return l;
  }

  Node* forward(Tape& t, Node* x, bool training, double drop, Rng* drop_rng) const {
    Node* h = batch_norm(t, x, t.param_node(*bn_g), t.param_node(*bn_b), *bn_rm, *bn_rv,
                         training);
    h = relu(t, h);
    h = conv3d(t, h, t.param_node(*w), t.param_node(*b), dilation);
    if (training && drop > 0 && drop_rng) h = dropout(t, h, drop, *drop_rng);
    return h;
  }
};

/// Dense block: layer k consumes the concatenation of the block input and all
/// prior layer outputs; the block output concatenates input with every layer
/// output (cin + L*growth channels). Dilated variants pass the rate ladder.
struct DenseBlock {
  std::vector<DenseLayer> layers;
  int max_dilation = 1;

  static DenseBlock make(ParamStore& ps, const std::string& name, int cin, int growth,
                         const std::vector<int>& dilations) {
    DenseBlock b;
    int c = cin;
    for (size_t k = 0; k < dilations.size(); ++k) {
      b.layers.push_back(DenseLayer::make(ps, name + ".l" + std::to_string(k), c, growth,
                                          dilations[k]));
      b.max_dilation = std::max(b.max_dilation, dilations[k]);
      c += growth;
    }
    return b;
  }

  Node* forward(Tape& t, Node* x, bool training, double drop = 0.0,
                Rng* drop_rng = nullptr) const {
    const Shape5 s = x->value.shape;
    const int need = 2 * max_dilation + 1;
    if (s.d < need || s.h < need || s.w < need)
      throw ConfigError("dense block: spatial shape " + nn::to_string(s) +
                        " too small for dilation " + std::to_string(max_dilation));
    Node* cur = x;
    for (const auto& l : layers) {
      Node* y = l.forward(t, cur, training, drop, drop_rng);
      cur = concat_channels(t, {cur, y});
    }
    return cur;
  }
};

/// BN -> ReLU -> 1x1x1 conv halving the channel count.
struct Transition {
  Parameter *bn_g, *bn_b, *bn_rm, *bn_rv, *w, *b;
  int cout = 0;

  static Transition make(ParamStore& ps, const std::string& name, int cin) {
    Transition tr;
    tr.cout = cin / 2;
    tr.bn_g = ps.constant(name + ".bn_g", cin, 1.f);
    tr.bn_b = ps.zeros(name + ".bn_b", cin);
    tr.bn_rm = ps.buffer(name + ".bn_rm", cin, 0.f);
    tr.bn_rv = ps.buffer(name + ".bn_rv", cin, 1.f);
    tr.w = ps.conv_weight(name + ".w", 1, cin, tr.cout);
    tr.b = ps.zeros(name + ".b", tr.cout);
    return tr;
  }

  Node* forward(Tape& t, Node* x, bool training) const {
    Node* h = batch_norm(t, x, t.param_node(*bn_g), t.param_node(*bn_b), *bn_rm, *bn_rv,
                         training);
    h = relu(t, h);
    return conv1x1(t, h, t.param_node(*w), t.param_node(*b));
  }
};

/// Transposed-conv x2 upsampling to a fixed channel width.
struct TransitionUp {
  Parameter *w, *b;

  static TransitionUp make(ParamStore& ps, const std::string& name, int cin, int cout) {
    TransitionUp u;
    u.w = ps.conv_weight(name + ".w", 27, cin, cout);
    u.b = ps.zeros(name + ".b", cout);
    return u;
  }

  Node* forward(Tape& t, Node* x) const {
    return conv_transpose3d(t, x, t.param_node(*w), t.param_node(*b));
  }
};

/// Attention gate on a skip connection. The skip features are projected to
/// the gating width, combined additively with the (upsampled) gating signal,
/// reduced by channel average / channel max / a 1x1x1 squeeze, and mapped
/// through ELU -> 1x1x1 conv -> sigmoid to a per-voxel score in (0,1).
struct AttentionModule {
  Parameter *proj_w, *proj_b, *squeeze_w, *squeeze_b, *out_w, *out_b;
  int gating_channels = 0;

  static AttentionModule make(ParamStore& ps, const std::string& name, int skip_c,
                              int gating_c) {
    AttentionModule a;
    a.gating_channels = gating_c;
    a.proj_w = ps.conv_weight(name + ".proj_w", 1, skip_c, gating_c);
    a.proj_b = ps.zeros(name + ".proj_b", gating_c);
    a.squeeze_w = ps.conv_weight(name + ".squeeze_w", 1, gating_c, 1);
    a.squeeze_b = ps.zeros(name + ".squeeze_b", 1);
    a.out_w = ps.conv_weight(name + ".out_w", 1, 3, 1);
    a.out_b = ps.zeros(name + ".out_b", 1);
    return a;
  }

  /// Returns (scaled skip features, score map).
  std::pair<Node*, Node*> forward(Tape& t, Node* skip, Node* gating) const {
    const Shape5 ss = skip->value.shape, gs = gating->value.shape;
    Node* g = gating;
    int sd = gs.d;
    while (sd < ss.d) {
      g = upsample_nearest2(t, g);
      sd *= 2;
    }
    if (g->value.shape.d != ss.d || g->value.shape.h != ss.h || g->value.shape.w != ss.w)
      throw std::invalid_argument("attention: gating shape is not skip / 2^k");
    Node* proj = conv1x1(t, skip, t.param_node(*proj_w), t.param_node(*proj_b));
    if (proj->value.shape.c != g->value.shape.c)
      throw std::logic_error("attention: channel mismatch after projection");
    Node* sum = add(t, proj, g);
    Node* sq = conv1x1(t, sum, t.param_node(*squeeze_w), t.param_node(*squeeze_b));
    Node* feats = concat_channels(t, {channel_mean(t, sum), channel_max(t, sum), sq});
    Node* score = sigmoid(t, conv1x1(t, elu(t, feats), t.param_node(*out_w),
                                     t.param_node(*out_b)));
    return {broadcast_mul(t, skip, score), score};
  }
};

}  // namespace nn

/// Everything the forward pass exposes, as tape nodes.
struct ForwardNodes {
  nn::Node* p_dentate = nullptr;     // (n, m, 2) softmax
  nn::Node* p_interposed = nullptr;  // (n, m, 2) softmax
  nn::Node* p_attention = nullptr;   // (n, m, 2) softmax
  nn::Node* p_joint = nullptr;       // (n, m, 3) softmax, joint3 head mode only
  nn::Node* score_s1 = nullptr;      // full-resolution attention score
  nn::Node* score_s2 = nullptr;      // half-resolution attention score
  nn::Node* enc_d1 = nullptr;        // encoder block outputs (feature dump)
  nn::Node* enc_d2 = nullptr;
  nn::Node* enc_d3 = nullptr;
};

/// The full dual-head segmentation network.
class DcnNet {
 public:
  explicit DcnNet(const ModelConfig& cfg) : cfg_(cfg), store_(splitmix64(cfg.seed ^ 0x6e657477)) {
    cfg_.validate();
    using namespace nn;
    const int g = cfg_.growth_rate;
    stem_w_ = store_.conv_weight("stem.w", 27, 1, cfg_.stem_channels);
    stem_b_ = store_.zeros("stem.b", cfg_.stem_channels);

    int c = cfg_.stem_channels;
    ddb1_ = DenseBlock::make(store_, "enc.ddb1", c, g, cfg_.ddb_dilations[0]);
    const int c1 = c + cfg_.ddb_layers[0] * g;
    t1_ = Transition::make(store_, "enc.t1", c1);
    ddb2_ = DenseBlock::make(store_, "enc.ddb2", t1_.cout, g, cfg_.ddb_dilations[1]);
    const int c2 = t1_.cout + cfg_.ddb_layers[1] * g;
    t2_ = Transition::make(store_, "enc.t2", c2);
    ddb3_ = DenseBlock::make(store_, "enc.ddb3", t2_.cout, g, cfg_.ddb_dilations[2]);
    const int c3 = t2_.cout + cfg_.ddb_layers[2] * g;

    const int s1_c = c1;
    const int s2_c = c2 + 1;  // + pyramid level 1
    const int s3_c = c3 + 1;  // + pyramid level 2
    const std::vector<int> dec_dil(static_cast<size_t>(cfg_.decoder_layers_per_block), 1);
    dec3_ = DenseBlock::make(store_, "dec.b3", s3_c, g, dec_dil);
    const int b3_c = s3_c + cfg_.decoder_layers_per_block * g;
    up2_ = TransitionUp::make(store_, "dec.up2", b3_c, cfg_.decoder_up_channels);
    att2_ = AttentionModule::make(store_, "dec.att2", s2_c, cfg_.decoder_up_channels);
    dec2_ = DenseBlock::make(store_, "dec.b2", cfg_.decoder_up_channels + s2_c, g, dec_dil);
    const int b2_c = cfg_.decoder_up_channels + s2_c + cfg_.decoder_layers_per_block * g;
    up1_ = TransitionUp::make(store_, "dec.up1", b2_c, cfg_.decoder_up_channels);
    att1_ = AttentionModule::make(store_, "dec.att1", s1_c, cfg_.decoder_up_channels);
    dec1_ = DenseBlock::make(store_, "dec.b1", cfg_.decoder_up_channels + s1_c, g, dec_dil);
    const int b1_c = cfg_.decoder_up_channels + s1_c + cfg_.decoder_layers_per_block * g;

    final_bn_g_ = store_.constant("head.bn_g", b1_c, 1.f);
    final_bn_b_ = store_.zeros("head.bn_b", b1_c);
    final_bn_rm_ = store_.buffer("head.bn_rm", b1_c, 0.f);
    final_bn_rv_ = store_.buffer("head.bn_rv", b1_c, 1.f);
    if (cfg_.head_mode == ModelConfig::HeadMode::kIndependent) {
      head_d_w_ = store_.conv_weight("head.dentate.w", 1, b1_c, 2);
      head_d_b_ = store_.zeros("head.dentate.b", 2);
      head_i_w_ = store_.conv_weight("head.interposed.w", 1, b1_c, 2);
      head_i_b_ = store_.zeros("head.interposed.b", 2);
    } else {
      head_j_w_ = store_.conv_weight("head.joint.w", 1, b1_c, 3);
      head_j_b_ = store_.zeros("head.joint.b", 3);
    }
    head_a_w_ = store_.conv_weight("head.attention.w", 1, 2, 2);
    head_a_b_ = store_.zeros("head.attention.b", 2);
  }

  const ModelConfig& config() const { return cfg_; }

  /// Forward pass over a patch batch. `pyr1`/`pyr2` are the average-pooled
  /// half and quarter resolution copies of the input patches.
  ForwardNodes forward(nn::Tape& tape, const nn::Tensor& patches, const nn::Tensor& pyr1,
                       const nn::Tensor& pyr2, bool training, Rng* drop_rng = nullptr) const {
    using namespace nn;
    const Shape5 s = patches.shape;
    if (s.c != 1) throw std::invalid_argument("forward: expected single-channel patches");
    if (s.d % 4 || s.h % 4 || s.w % 4)
      throw std::invalid_argument("forward: patch shape " + nn::to_string(s) +
                                  " must be divisible by 4");
    if (pyr1.shape.d != s.d / 2 || pyr2.shape.d != s.d / 4 || pyr1.shape.n != s.n ||
        pyr2.shape.n != s.n)
      throw std::invalid_argument("forward: pyramid shapes inconsistent with patches");

    Node* x = tape.constant(patches);
    Node* p1 = tape.constant(pyr1);
    Node* p2 = tape.constant(pyr2);

    Node* stem = conv3d(tape, x, tape.param_node(*stem_w_), tape.param_node(*stem_b_), 1);
    Node* d1 = ddb1_.forward(tape, stem, training, cfg_.dropout_rate, drop_rng);
    Node* d2 = ddb2_.forward(tape, t1_.forward(tape, d1, training), training,
                             cfg_.dropout_rate, drop_rng);
    Node* d3 = ddb3_.forward(tape, t2_.forward(tape, d2, training), training,
                             cfg_.dropout_rate, drop_rng);

    Node* s2 = concat_channels(tape, {max_pool(tape, d2, 2), p1});
    Node* s3 = concat_channels(tape, {max_pool(tape, d3, 4), p2});

    Node* b3 = dec3_.forward(tape, s3, training);
    Node* u2 = up2_.forward(tape, b3);
    auto [att2_scaled, score2] = att2_.forward(tape, s2, u2);
    Node* b2 = dec2_.forward(tape, concat_channels(tape, {u2, att2_scaled}), training);
    Node* u1 = up1_.forward(tape, b2);
    auto [att1_scaled, score1] = att1_.forward(tape, d1, u1);
    Node* b1 = dec1_.forward(tape, concat_channels(tape, {u1, att1_scaled}), training);

    Node* f = relu(tape, batch_norm(tape, b1, tape.param_node(*final_bn_g_),
                                    tape.param_node(*final_bn_b_), *final_bn_rm_,
                                    *final_bn_rv_, training));
    ForwardNodes out;
    out.score_s1 = score1;
    out.score_s2 = score2;
    out.enc_d1 = d1;
    out.enc_d2 = d2;
    out.enc_d3 = d3;
    if (cfg_.head_mode == ModelConfig::HeadMode::kIndependent) {
      out.p_dentate = softmax_channels(
          tape, conv1x1(tape, f, tape.param_node(*head_d_w_), tape.param_node(*head_d_b_)));
      out.p_interposed = softmax_channels(
          tape, conv1x1(tape, f, tape.param_node(*head_i_w_), tape.param_node(*head_i_b_)));
    } else {
      out.p_joint = softmax_channels(
          tape, conv1x1(tape, f, tape.param_node(*head_j_w_), tape.param_node(*head_j_b_)));
    }
    Node* a_in = concat_channels(tape, {score1, upsample_nearest2(tape, score2)});
    out.p_attention = softmax_channels(
        tape, conv1x1(tape, a_in, tape.param_node(*head_a_w_), tape.param_node(*head_a_b_)));
    return out;
  }

  std::vector<nn::Parameter*>& parameters() { return store_.trainable(); }
  const std::vector<nn::Parameter*>& parameters() const {
    return const_cast<DcnNet*>(this)->store_.trainable();
  }
  std::vector<nn::Parameter*>& buffers() { return store_.buffers(); }

  std::int64_t parameter_count() const {
    std::int64_t n = 0;
    for (const auto* p : parameters()) n += p->value.shape.count();
    return n;
  }

  void zero_grad() {
    for (auto* p : store_.trainable()) p->zero_grad();
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const nn::Tensor& t) {
      const auto* bytes = reinterpret_cast<const unsigned char*>(t.v.data());
      for (size_t i = 0; i < t.v.size() * sizeof(float); ++i) {
        h ^= bytes[i];
        h *= 0x100000001b3ULL;
      }
    };
    for (const auto* p : parameters()) mix(p->value);
    for (auto* p : const_cast<DcnNet*>(this)->buffers()) mix(p->value);
    return h;
  }

  /// Flat snapshot of all parameters and buffers (best-epoch restore).
  std::vector<float> state_vector() const {
    std::vector<float> out;
    for (const auto* p : parameters()) out.insert(out.end(), p->value.v.begin(), p->value.v.end());
    for (auto* p : const_cast<DcnNet*>(this)->buffers())
      out.insert(out.end(), p->value.v.begin(), p->value.v.end());
    return out;
  }

  void load_state_vector(const std::vector<float>& state) {
    size_t off = 0;
    auto put = [&](nn::Parameter* p) {
      if (off + p->value.v.size() > state.size())
        throw std::invalid_argument("state vector size mismatch");
      std::copy(state.begin() + long(off), state.begin() + long(off + p->value.v.size()),
                p->value.v.begin());
      off += p->value.v.size();
    };
    for (auto* p : parameters()) put(p);
    for (auto* p : buffers()) put(p);
    if (off != state.size()) throw std::invalid_argument("state vector size mismatch");
  }

  /// Checkpoint: directory with meta.json and weights.bin (params then
  /// buffers, registration order, float32).
  void save(const std::string& dir) const {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    nlohmann::ordered_json meta;
    meta["format_version"] = 1;
    meta["config"] = cfg_.to_json();
    meta["seed"] = cfg_.seed;
    meta["parameter_count"] = parameter_count();
    nlohmann::ordered_json tensors = nlohmann::ordered_json::array();
    auto add = [&tensors](const nn::Parameter* p) {
      tensors.push_back({{"name", p->name}, {"size", p->value.shape.count()}});
    };
    for (const auto* p : parameters()) add(p);
    for (auto* p : const_cast<DcnNet*>(this)->buffers()) add(p);
    meta["tensors"] = tensors;
    std::ofstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw IoError("cannot write checkpoint meta: " + dir);
    mf << meta.dump(2) << "\n";
    std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!wf) throw IoError("cannot write checkpoint weights: " + dir);
    const auto state = state_vector();
    wf.write(reinterpret_cast<const char*>(state.data()),
             std::streamsize(state.size() * sizeof(float)));
  }

  static DcnNet load(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw IoError("cannot read checkpoint meta: " + dir);
    nlohmann::json meta = nlohmann::json::parse(mf);
    if (meta.at("format_version").get<int>() != 1)
      throw IoError("unsupported checkpoint format version in " + dir);
    DcnNet net(ModelConfig::from_json(meta.at("config")));
    std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!wf) throw IoError("cannot read checkpoint weights: " + dir);
    std::int64_t total = 0;
    for (const auto* p : net.parameters()) total += p->value.shape.count();
    for (auto* p : net.buffers()) total += p->value.shape.count();
    std::vector<float> state(static_cast<size_t>(total));
    wf.read(reinterpret_cast<char*>(state.data()), std::streamsize(state.size() * sizeof(float)));
    if (wf.gcount() != std::streamsize(state.size() * sizeof(float)))
      throw IoError("checkpoint weights truncated: " + dir);
    net.load_state_vector(state);
    return net;
  }

  // Standalone module accessors for unit-level checks.
  const nn::DenseBlock& encoder_block(int i) const {
    return i == 0 ? ddb1_ : (i == 1 ? ddb2_ : ddb3_);
  }
  const nn::AttentionModule& attention_module(int i) const { return i == 0 ? att1_ : att2_; }

 private:
  ModelConfig cfg_;
  nn::ParamStore store_;
  nn::Parameter *stem_w_ = nullptr, *stem_b_ = nullptr;
  nn::DenseBlock ddb1_, ddb2_, ddb3_;
  nn::Transition t1_, t2_;
  nn::DenseBlock dec3_, dec2_, dec1_;
  nn::TransitionUp up2_, up1_;
  nn::AttentionModule att2_, att1_;
  nn::Parameter *final_bn_g_ = nullptr, *final_bn_b_ = nullptr, *final_bn_rm_ = nullptr,
                *final_bn_rv_ = nullptr;
  nn::Parameter *head_d_w_ = nullptr, *head_d_b_ = nullptr;
  nn::Parameter *head_i_w_ = nullptr, *head_i_b_ = nullptr;
  nn::Parameter *head_j_w_ = nullptr, *head_j_b_ = nullptr;
  nn::Parameter *head_a_w_ = nullptr, *head_a_b_ = nullptr;
};

}  // namespace dcnseg
