#pragma once

// Recurrent-depth decoder-only transformer.
//
// A block of L pre-norm GPT-2 layers is applied R times to the hidden
// states; every application reuses the same weights. The embedding table is
// also the output head (no bias). Positional embeddings, when enabled, are
// added once to the input embeddings.
//
//   h0      = embed(tokens) [+ pos]
//   h(r+1)  = block(h(r))           r = 0..R-1
//   logits  = layer_norm(h(R)) * embed^T

#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "loopformer/error.hpp"
#include "loopformer/kg_data.hpp"
#include "loopformer/tensor.hpp"

namespace loopformer {

enum class PosMode { kAPE, kNoPE };
enum class InitMode { kZeroProj, kDefault };

inline std::string_view to_string(PosMode m) { return m == PosMode::kAPE ? "APE" : "NoPE"; }
inline std::string_view to_string(InitMode m) {
  return m == InitMode::kZeroProj ? "zero-proj" : "default";
}

inline PosMode parse_pos_mode(std::string_view s) {
  if (s == "APE" || s == "ape") return PosMode::kAPE;
  if (s == "NoPE" || s == "nope") return PosMode::kNoPE;
  throw Error(ErrorKind::kInvalidConfig, "unknown pos_mode '" + std::string(s) + "'");
}

inline InitMode parse_init_mode(std::string_view s) {
  if (s == "zero-proj") return InitMode::kZeroProj;
  if (s == "default") return InitMode::kDefault;
  throw Error(ErrorKind::kInvalidConfig, "unknown init_mode '" + std::string(s) + "'");
}

struct ModelConfig {
  int num_layers = 4;
  int embed_dim = 768;
  int num_heads = 12;
  int vocab_size = 211;
  int max_seq_len = 64;
  PosMode pos_mode = PosMode::kAPE;
  InitMode init_mode = InitMode::kZeroProj;
  // Standard deviation of the normal init for all non-projection weights.
  double init_std = 0.02;

  void validate() const {
    LOOPFORMER_CHECK(num_layers >= 1, ErrorKind::kInvalidConfig, "num_layers must be >= 1");
    LOOPFORMER_CHECK(embed_dim >= 1 && num_heads >= 1 && embed_dim % num_heads == 0,
                     ErrorKind::kInvalidConfig, "embed_dim must be divisible by num_heads");
    LOOPFORMER_CHECK(vocab_size >= 2, ErrorKind::kInvalidConfig, "vocab_size must be >= 2");
    LOOPFORMER_CHECK(max_seq_len >= 1, ErrorKind::kInvalidConfig, "max_seq_len must be >= 1");
    LOOPFORMER_CHECK(init_std > 0.0, ErrorKind::kInvalidConfig, "init_std must be positive");
  }

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct LayerParams {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> qkv_weight, qkv_bias;              // [d, 3d], [3d]
  Tensor<T> attn_proj_weight, attn_proj_bias;  // [d, d], [d]
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> fc_weight, fc_bias;                // [d, 4d], [4d]
  Tensor<T> mlp_proj_weight, mlp_proj_bias;    // [4d, d], [d]

  // Visits (name, tensor) pairs; Self may be const or non-const.
  template <typename Self, typename F>
  static void visit(Self& p, const std::string& prefix, F&& f) {
    f(prefix + "ln1.gain", p.ln1_gain);
    f(prefix + "ln1.bias", p.ln1_bias);
    f(prefix + "attn.qkv.weight", p.qkv_weight);
    f(prefix + "attn.qkv.bias", p.qkv_bias);
    f(prefix + "attn.proj.weight", p.attn_proj_weight);
    f(prefix + "attn.proj.bias", p.attn_proj_bias);
    f(prefix + "ln2.gain", p.ln2_gain);
    f(prefix + "ln2.bias", p.ln2_bias);
    f(prefix + "mlp.fc.weight", p.fc_weight);
    f(prefix + "mlp.fc.bias", p.fc_bias);
    f(prefix + "mlp.proj.weight", p.mlp_proj_weight);
    f(prefix + "mlp.proj.bias", p.mlp_proj_bias);
  }

  bool operator==(const LayerParams&) const = default;
};

template <typename T>
struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  Tensor<T> token_embedding;     // [V, d]; also the output head
  Tensor<T> position_embedding;  // [max_seq_len, d]; empty under NoPE
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_gain, final_bias;

  // Fixed traversal order used by checkpoints and the optimizer.
  template <typename F>
  void for_each_parameter(F&& f) { visit(*this, f); }

  template <typename F>
  void for_each_parameter(F&& f) const { visit(*this, f); }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for_each_parameter([&](const std::string& n, Tensor<T>& t) { out.emplace_back(n, &t); });
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for_each_parameter([&](const std::string&, const Tensor<T>& t) { total += t.values.size(); });
    return total;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.config = config;
    out.seed = seed;
    out.layers.resize(layers.size());
    auto dst = out.named_parameters();
    std::size_t i = 0;
    for_each_parameter([&](const std::string&, const Tensor<T>& t) { *dst[i++].second = t.template cast<U>(); });
    return out;
  }

  bool operator==(const Model&) const = default;

 private:
  template <typename Self, typename F>
  static void visit(Self& m, F& f) {
    f(std::string("token_embedding"), m.token_embedding);
    if (m.config.pos_mode == PosMode::kAPE) f(std::string("position_embedding"), m.position_embedding);
    for (std::size_t l = 0; l < m.layers.size(); ++l) {
      LayerParams<T>::visit(m.layers[l], "layer" + std::to_string(l) + ".", f);
    }
    f(std::string("final_ln.gain"), m.final_gain);
    f(std::string("final_ln.bias"), m.final_bias);
  }
};

template <typename T>
Model<T> init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::int64_t d = config.embed_dim, V = config.vocab_size;
  Model<T> m;
  m.config = config;
  m.seed = seed;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  const auto randn = [&](std::vector<std::int64_t> shape, double std) {
    Tensor<T> t(std::move(shape));
    for (auto& v : t.values) v = static_cast<T>(normal(rng) * std);
    return t;
  };
  const double proj_std = config.init_std / std::sqrt(2.0 * config.num_layers);
  const bool zero_proj = config.init_mode == InitMode::kZeroProj;

  m.token_embedding = randn({V, d}, config.init_std);
  if (config.pos_mode == PosMode::kAPE) {
    m.position_embedding = randn({config.max_seq_len, d}, config.init_std);
  }
  m.layers.resize(config.num_layers);
  for (auto& layer : m.layers) {
    layer.ln1_gain = Tensor<T>({d}, T(1));
    layer.ln1_bias = Tensor<T>({d});
    layer.qkv_weight = randn({d, 3 * d}, config.init_std);
    layer.qkv_bias = Tensor<T>({3 * d});
    layer.attn_proj_weight = zero_proj ? Tensor<T>({d, d}) : randn({d, d}, proj_std);
    layer.attn_proj_bias = Tensor<T>({d});
    layer.ln2_gain = Tensor<T>({d}, T(1));
    layer.ln2_bias = Tensor<T>({d});
    layer.fc_weight = randn({d, 4 * d}, config.init_std);
    layer.fc_bias = Tensor<T>({4 * d});
    layer.mlp_proj_weight = zero_proj ? Tensor<T>({4 * d, d}) : randn({4 * d, d}, proj_std);
    layer.mlp_proj_bias = Tensor<T>({d});
  }
  m.final_gain = Tensor<T>({d}, T(1));
  m.final_bias = Tensor<T>({d});
  return m;
}

// ---------------------------------------------------------------------------
// Batching. Sequences are right-padded with the pad token; the supervised
// position of each row is its last real token.

struct Batch {
  std::int64_t batch = 0;
  std::int64_t seq = 0;
  std::vector<int> tokens;     // [batch * seq]
  std::vector<int> positions;  // [batch * seq], 0..seq-1 per row
  AttentionMask mask;
  std::vector<int> answer_pos;  // [batch]
  std::vector<int> targets;     // [batch]

  std::vector<std::int64_t> answer_rows() const {
    std::vector<std::int64_t> rows(batch);
    for (std::int64_t b = 0; b < batch; ++b) rows[b] = b * seq + answer_pos[b];
    return rows;
  }
};

template <typename Get>
Batch make_batch_from(std::size_t count, Get&& get, int pad_token) {
  LOOPFORMER_CHECK(count > 0, ErrorKind::kEmptySplit, "cannot batch zero examples");
  Batch b;
  b.batch = static_cast<std::int64_t>(count);
  for (std::size_t i = 0; i < count; ++i) {
    const EncodedExample& ex = get(i);
    LOOPFORMER_CHECK(!ex.input.empty(), ErrorKind::kShapeMismatch, "empty input sequence");
    b.seq = std::max<std::int64_t>(b.seq, static_cast<std::int64_t>(ex.input.size()));
  }
  b.tokens.assign(b.batch * b.seq, pad_token);
  b.positions.resize(b.batch * b.seq);
  b.mask = {b.batch, b.seq, std::vector<std::uint8_t>(b.batch * b.seq, 0)};
  for (std::size_t i = 0; i < count; ++i) {
    const EncodedExample& ex = get(i);
    const auto base = static_cast<std::int64_t>(i) * b.seq;
    for (std::size_t t = 0; t < ex.input.size(); ++t) {
      b.tokens[base + t] = ex.input[t];
      b.mask.key_valid[base + t] = 1;
    }
    for (std::int64_t t = 0; t < b.seq; ++t) b.positions[base + t] = static_cast<int>(t);
    b.answer_pos.push_back(static_cast<int>(ex.input.size()) - 1);
    b.targets.push_back(ex.target);
  }
  return b;
}

inline Batch make_batch(std::span<const EncodedExample> examples, int pad_token) {
  return make_batch_from(examples.size(), [&](std::size_t i) -> const EncodedExample& { return examples[i]; },
                         pad_token);
}

inline Batch make_batch(std::span<const EncodedExample> examples,
                        std::span<const std::size_t> indices, int pad_token) {
  return make_batch_from(indices.size(),
                         [&](std::size_t i) -> const EncodedExample& { return examples[indices[i]]; },
                         pad_token);
}

// ---------------------------------------------------------------------------
// Forward pass pieces

template <typename T>
Var embed(Tape<T>& tape, const Model<T>& m, const Batch& batch) {
  const std::int64_t d = m.config.embed_dim;
  for (int t : batch.tokens) {
    LOOPFORMER_CHECK(t >= 0 && t < m.config.vocab_size, ErrorKind::kOutOfRange,
                     "token id " + std::to_string(t) + " outside vocabulary");
  }
  Var h = embedding(tape, tape.param(m.token_embedding), batch.tokens, {batch.batch, batch.seq, d});
  if (m.config.pos_mode == PosMode::kAPE) {
    LOOPFORMER_CHECK(batch.seq <= m.config.max_seq_len, ErrorKind::kShapeMismatch,
                     "sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                         std::to_string(m.config.max_seq_len));
    h = add(tape, h,
            embedding(tape, tape.param(m.position_embedding), batch.positions,
                      {batch.batch, batch.seq, d}));
  }
  return h;
}

// One pre-norm layer: h + attn(ln1(h)), then + mlp(ln2(.)).
template <typename T>
Var layer_apply(Tape<T>& tape, const Model<T>& m, int layer, Var h, const AttentionMask& mask) {
  const LayerParams<T>& p = m.layers.at(layer);
  const auto& shape = tape.shape(h);
  LOOPFORMER_CHECK(shape.size() == 3 && shape[0] == mask.batch && shape[1] == mask.seq &&
                       shape[2] == m.config.embed_dim,
                   ErrorKind::kShapeMismatch, "layer_apply: hidden state shape mismatch");
  Var a = layer_norm(tape, h, tape.param(p.ln1_gain), tape.param(p.ln1_bias));
  a = linear(tape, a, tape.param(p.qkv_weight), tape.param(p.qkv_bias));
  a = attention(tape, a, mask, m.config.num_heads);
  a = linear(tape, a, tape.param(p.attn_proj_weight), tape.param(p.attn_proj_bias));
  h = add(tape, h, a);
  Var f = layer_norm(tape, h, tape.param(p.ln2_gain), tape.param(p.ln2_bias));
  f = linear(tape, f, tape.param(p.fc_weight), tape.param(p.fc_bias));
  f = gelu(tape, f);
  f = linear(tape, f, tape.param(p.mlp_proj_weight), tape.param(p.mlp_proj_bias));
  return add(tape, h, f);
}

// One application of the shared L-layer block. Post-layer states are
// appended to `states` when given.
template <typename T>
Var block_apply(Tape<T>& tape, const Model<T>& m, Var h, const AttentionMask& mask,
                std::vector<Var>* states = nullptr) {
  for (int l = 0; l < m.config.num_layers; ++l) {
    h = layer_apply(tape, m, l, h, mask);
    if (states) states->push_back(h);
  }
  return h;
}

// Final layer norm followed by the tied unembedding.
template <typename T>
Var lm_head(Tape<T>& tape, const Model<T>& m, Var h) {
  return matmul_nt(tape, layer_norm(tape, h, tape.param(m.final_gain), tape.param(m.final_bias)),
                   tape.param(m.token_embedding));
}

struct ForwardOutput {
  Var logits;              // [batch, seq, V]
  Var final_state;         // h(R)
  std::vector<Var> sites;  // R*L + 1 states when traced, else empty
};

template <typename T>
ForwardOutput forward(Tape<T>& tape, const Model<T>& m, const Batch& batch, int iterations,
                      bool trace = false) {
  LOOPFORMER_CHECK(iterations >= 1, ErrorKind::kInvalidConfig, "recurrence R must be >= 1");
  ForwardOutput out;
  Var h = embed(tape, m, batch);
  if (trace) out.sites.push_back(h);
  for (int r = 0; r < iterations; ++r) h = block_apply(tape, m, h, batch.mask, trace ? &out.sites : nullptr);
  out.final_state = h;
  out.logits = lm_head(tape, m, h);
  return out;
}

// h(R) without the unembedding.
template <typename T>
Var run_loop(Tape<T>& tape, const Model<T>& m, const Batch& batch, int iterations) {
  LOOPFORMER_CHECK(iterations >= 1, ErrorKind::kInvalidConfig, "recurrence R must be >= 1");
  Var h = embed(tape, m, batch);
  for (int r = 0; r < iterations; ++r) h = block_apply(tape, m, h, batch.mask);
  return h;
}

// Logits at each row's answer position only: [batch, V].
template <typename T>
Var answer_logits(Tape<T>& tape, const Model<T>& m, Var state, const Batch& batch) {
  const auto rows = batch.answer_rows();
  return lm_head(tape, m, gather_rows(tape, state, rows));
}

// ---------------------------------------------------------------------------
// Hidden-state traces

// Site s = r*L + l holds the state after layer l of iteration r (site 0 is
// the embedded input), so at(r, L) and at(r + 1, 0) name the same state.
template <typename T>
struct HiddenTrace {
  int iterations = 0;
  int layers = 0;
  std::int64_t batch = 0, seq = 0, dim = 0;
  std::vector<Tensor<T>> states;  // [R*L + 1], each [batch, seq, dim]

  int num_sites() const { return iterations * layers + 1; }

  static int site(int r, int l, int num_layers) { return r * num_layers + l; }

  const Tensor<T>& at(int r, int l) const {
    LOOPFORMER_CHECK(r >= 0 && l >= 0 && l <= layers && site(r, l, layers) < num_sites(),
                     ErrorKind::kOutOfRange, "trace index out of range");
    return states[site(r, l, layers)];
  }
};

template <typename T>
struct TracedForward {
  Tensor<T> logits;  // [batch, seq, V]
  HiddenTrace<T> trace;
};

template <typename T>
TracedForward<T> forward_traced(const Model<T>& m, const Batch& batch, int iterations) {
  Tape<T> tape(false);
  const ForwardOutput out = forward(tape, m, batch, iterations, true);
  TracedForward<T> result;
  result.logits = tape.value(out.logits);
  result.trace.iterations = iterations;
  result.trace.layers = m.config.num_layers;
  result.trace.batch = batch.batch;
  result.trace.seq = batch.seq;
  result.trace.dim = m.config.embed_dim;
  for (Var s : out.sites) result.trace.states.push_back(tape.value(s));
  return result;
}

template <typename T>
Tensor<T> forward_logits(const Model<T>& m, const Batch& batch, int iterations) {
  Tape<T> tape(false);
  return tape.value(forward(tape, m, batch, iterations).logits);
}

// Final norm + head applied to an arbitrary stored state: [rows, d] -> [rows, V].
template <typename T>
Tensor<T> lens_logits(const Model<T>& m, const Tensor<T>& state) {
  Tape<T> tape(false);
  return tape.value(lm_head(tape, m, tape.constant(state)));
}

// ---------------------------------------------------------------------------
// Checkpoints.
//
//   "LOOPFMR1"
//   u32 header_bytes, header text ("key=value\n" lines)
//   u32 blob_count, then per blob:
//     u32 name_bytes, name, u8 scalar_bytes (4|8), u32 ndim, i64 dims[ndim], raw values
//   u64 FNV-1a checksum of every preceding byte
// Integers and floats are stored in host (little-endian) byte order.

inline constexpr char kCheckpointMagic[8] = {'L', 'O', 'O', 'P', 'F', 'M', 'R', '1'};

inline std::uint64_t fnv1a(const void* data, std::size_t n,
                           std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

struct CheckpointBlob {
  std::string name;
  Tensor<double> wide;  // used when scalar_bytes == 8
  Tensor<float> narrow;  // used when scalar_bytes == 4
  int scalar_bytes = 4;
};

struct Checkpoint {
  std::map<std::string, std::string> header;
  std::vector<CheckpointBlob> blobs;

  template <typename T>
  void add(const std::string& name, const Tensor<T>& t) {
    CheckpointBlob b;
    b.name = name;
    if constexpr (std::is_same_v<T, double>) {
      b.scalar_bytes = 8;
      b.wide = t;
    } else {
      b.scalar_bytes = 4;
      b.narrow = t.template cast<float>();
    }
    blobs.push_back(std::move(b));
  }

  const CheckpointBlob* find(const std::string& name) const {
    for (const auto& b : blobs) {
      if (b.name == name) return &b;
    }
    return nullptr;
  }

  template <typename T>
  Tensor<T> get(const std::string& name) const {
    const CheckpointBlob* b = find(name);
    LOOPFORMER_CHECK(b != nullptr, ErrorKind::kFormat, "checkpoint is missing blob '" + name + "'");
    return b->scalar_bytes == 8 ? b->wide.template cast<T>() : b->narrow.template cast<T>();
  }

  const std::string& require(const std::string& key) const {
    auto it = header.find(key);
    LOOPFORMER_CHECK(it != header.end(), ErrorKind::kFormat, "checkpoint header lacks '" + key + "'");
    return it->second;
  }
};

namespace detail {

class HashingWriter {
 public:
  explicit HashingWriter(std::ostream& out) : out_(out) {}
  void write(const void* data, std::size_t n) {
    out_.write(static_cast<const char*>(data), static_cast<std::streamsize>(n));
    hash_ = fnv1a(data, n, hash_);
  }
  template <typename I>
  void put(I v) { write(&v, sizeof v); }
  std::uint64_t hash() const { return hash_; }

 private:
  std::ostream& out_;
  std::uint64_t hash_ = 1469598103934665603ULL;
};

class HashingReader {
 public:
  explicit HashingReader(std::istream& in, std::string what) : in_(in), what_(std::move(what)) {}
  void read(void* data, std::size_t n) {
    in_.read(static_cast<char*>(data), static_cast<std::streamsize>(n));
    LOOPFORMER_CHECK(static_cast<std::size_t>(in_.gcount()) == n, ErrorKind::kFormat,
                     what_ + ": truncated checkpoint");
    hash_ = fnv1a(data, n, hash_);
  }
  template <typename I>
  I get() {
    I v;
    read(&v, sizeof v);
    return v;
  }
  std::uint64_t hash() const { return hash_; }

 private:
  std::istream& in_;
  std::string what_;
  std::uint64_t hash_ = 1469598103934665603ULL;
};

}  // namespace detail

inline void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  LOOPFORMER_CHECK(out.good(), ErrorKind::kIo, "cannot open " + path.string());
  detail::HashingWriter w(out);
  w.write(kCheckpointMagic, sizeof kCheckpointMagic);
  std::string header;
  for (const auto& [k, v] : ckpt.header) header += k + "=" + v + "\n";
  w.put(static_cast<std::uint32_t>(header.size()));
  w.write(header.data(), header.size());
  w.put(static_cast<std::uint32_t>(ckpt.blobs.size()));
  for (const auto& b : ckpt.blobs) {
    w.put(static_cast<std::uint32_t>(b.name.size()));
    w.write(b.name.data(), b.name.size());
    w.put(static_cast<std::uint8_t>(b.scalar_bytes));
    const auto& shape = b.scalar_bytes == 8 ? b.wide.shape : b.narrow.shape;
    w.put(static_cast<std::uint32_t>(shape.size()));
    for (std::int64_t dim : shape) w.put(dim);
    if (b.scalar_bytes == 8) w.write(b.wide.data(), b.wide.values.size() * 8);
    else w.write(b.narrow.data(), b.narrow.values.size() * 4);
  }
  const std::uint64_t checksum = w.hash();
  out.write(reinterpret_cast<const char*>(&checksum), sizeof checksum);
  LOOPFORMER_CHECK(out.good(), ErrorKind::kIo, "write failed: " + path.string());
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  LOOPFORMER_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  detail::HashingReader r(in, path.string());
  char magic[8];
  r.read(magic, sizeof magic);
  LOOPFORMER_CHECK(std::memcmp(magic, kCheckpointMagic, 8) == 0, ErrorKind::kFormat,
                   path.string() + ": not a checkpoint");
  Checkpoint ckpt;
  std::string header(r.get<std::uint32_t>(), '\0');
  r.read(header.data(), header.size());
  std::istringstream lines(header);
  for (std::string line; std::getline(lines, line);) {
    const auto eq = line.find('=');
    LOOPFORMER_CHECK(eq != std::string::npos, ErrorKind::kFormat, "bad checkpoint header line");
    ckpt.header[line.substr(0, eq)] = line.substr(eq + 1);
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    CheckpointBlob b;
    b.name.resize(r.get<std::uint32_t>());
    r.read(b.name.data(), b.name.size());
    b.scalar_bytes = r.get<std::uint8_t>();
    LOOPFORMER_CHECK(b.scalar_bytes == 4 || b.scalar_bytes == 8, ErrorKind::kFormat,
                     "unsupported scalar width in checkpoint");
    std::vector<std::int64_t> shape(r.get<std::uint32_t>());
    for (auto& dim : shape) dim = r.get<std::int64_t>();
    if (b.scalar_bytes == 8) {
      b.wide = Tensor<double>(shape);
      r.read(b.wide.data(), b.wide.values.size() * 8);
    } else {
      b.narrow = Tensor<float>(shape);
      r.read(b.narrow.data(), b.narrow.values.size() * 4);
    }
    ckpt.blobs.push_back(std::move(b));
  }
  const std::uint64_t expected = r.hash();
  std::uint64_t stored = 0;
  in.read(reinterpret_cast<char*>(&stored), sizeof stored);
  LOOPFORMER_CHECK(in.gcount() == sizeof stored, ErrorKind::kFormat, path.string() + ": missing checksum");
  LOOPFORMER_CHECK(stored == expected, ErrorKind::kFormat, path.string() + ": checksum mismatch");
  return ckpt;
}

inline std::map<std::string, std::string> config_header(const ModelConfig& c) {
  std::ostringstream init_std;
  init_std.precision(17);
  init_std << c.init_std;
  return {{"num_layers", std::to_string(c.num_layers)},
          {"embed_dim", std::to_string(c.embed_dim)},
          {"num_heads", std::to_string(c.num_heads)},
          {"vocab_size", std::to_string(c.vocab_size)},
          {"max_seq_len", std::to_string(c.max_seq_len)},
          {"pos_mode", std::string(to_string(c.pos_mode))},
          {"init_mode", std::string(to_string(c.init_mode))},
          {"init_std", init_std.str()}};
}

template <typename T>
Checkpoint model_checkpoint(const Model<T>& m, std::uint64_t step) {
  Checkpoint c;
  c.header = config_header(m.config);
  c.header["seed"] = std::to_string(m.seed);
  c.header["step"] = std::to_string(step);
  m.for_each_parameter([&](const std::string& name, const Tensor<T>& t) { c.add(name, t); });
  return c;
}

template <typename T>
Model<T> model_from_checkpoint(const Checkpoint& c) {
  ModelConfig cfg;
  cfg.num_layers = std::stoi(c.require("num_layers"));
  cfg.embed_dim = std::stoi(c.require("embed_dim"));
  cfg.num_heads = std::stoi(c.require("num_heads"));
  cfg.vocab_size = std::stoi(c.require("vocab_size"));
  cfg.max_seq_len = std::stoi(c.require("max_seq_len"));
  cfg.pos_mode = parse_pos_mode(c.require("pos_mode"));
  cfg.init_mode = parse_init_mode(c.require("init_mode"));
  cfg.init_std = std::stod(c.require("init_std"));
  cfg.validate();
  Model<T> m;
  m.config = cfg;
  m.seed = std::stoull(c.require("seed"));
  m.layers.resize(cfg.num_layers);
  m.for_each_parameter([&](const std::string& name, Tensor<T>& t) { t = c.get<T>(name); });
  const std::int64_t d = cfg.embed_dim;
  const std::vector<std::int64_t> expect{cfg.vocab_size, d};
  LOOPFORMER_CHECK(m.token_embedding.shape == expect, ErrorKind::kFormat, "checkpoint embedding shape disagrees with header");
  return m;
}

// Content hash of all parameters, in checkpoint order.
template <typename T>
std::uint64_t model_checksum(const Model<T>& m) {
  std::uint64_t h = 1469598103934665603ULL;
  m.for_each_parameter([&](const std::string& name, const Tensor<T>& t) {
    h = fnv1a(name.data(), name.size(), h);
    h = fnv1a(t.data(), t.values.size() * sizeof(T), h);
  });
  return h;
}

// Full-model gradient check in double precision: random parameters
// (init plus N(0, 0.2) noise so gains and biases are non-trivial), random
// token sequences of length `seq_len`, cross-entropy at the last position.
inline GradCheckResult model_gradient_check(ModelConfig config, int seq_len, int iterations,
                                            std::size_t coords, std::uint64_t seed) {
  config.init_mode = InitMode::kDefault;
  config.validate();
  LOOPFORMER_CHECK(seq_len >= 1 && seq_len <= config.max_seq_len, ErrorKind::kInvalidConfig,
                   "grad-check sequence length out of range");
  Model<double> m = init_model<double>(config, seed);
  std::mt19937_64 rng(mix_seed(seed, 0x6C4ECC));
  std::normal_distribution<double> noise(0.0, 0.2);
  std::vector<Tensor<double>*> params;
  for (auto& [name, p] : m.named_parameters()) {
    for (double& v : p->values) v += noise(rng);
    params.push_back(p);
  }
  std::vector<EncodedExample> ex(3);
  for (auto& e : ex) {
    e.input.resize(static_cast<std::size_t>(seq_len));
    for (int& t : e.input) t = static_cast<int>(uniform_below(rng, config.vocab_size - 1));
    e.target = static_cast<int>(uniform_below(rng, config.vocab_size - 1));
  }
  const Batch b = make_batch(ex, config.vocab_size - 1);
  const auto loss = [&](Tape<double>& t) {
    return cross_entropy(t, answer_logits(t, m, run_loop(t, m, b, iterations), b), b.targets);
  };
  return finite_difference_check<double>(loss, std::span<Tensor<double>* const>(params), 1e-5, coords,
                                         mix_seed(seed, 0x6C4ECD));
}

}  // namespace loopformer
