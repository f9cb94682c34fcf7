#pragma once

// Synthetic knowledge graphs and multi-hop query datasets.
//
// Two graph families are supported: random functional graphs (every entity
// picks `avg_out_degree` distinct relations, each with a uniformly random
// tail) and permutation graphs (every relation is a bijection on entities).
// Queries are encoded as <e_h><r_1>...<r_k> with the tail entity as target.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "loopformer/error.hpp"

namespace loopformer {

struct Fact {
  int head = 0;
  int relation = 0;
  int tail = 0;

  auto operator<=>(const Fact&) const = default;
};

enum class GraphKind { kRandomFunctional, kPermutation };

inline std::string_view to_string(GraphKind kind) {
  return kind == GraphKind::kPermutation ? "permutation" : "random-functional";
}

inline GraphKind parse_graph_kind(std::string_view text) {
  if (text == "permutation") return GraphKind::kPermutation;
  if (text == "random-functional") return GraphKind::kRandomFunctional;
  throw Error(ErrorKind::kFormat, "unknown graph kind '" + std::string(text) + "'");
}

// splitmix64 finalizer; derives independent sub-seeds from one user seed.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t tag) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Uniform integer in [0, n). Implemented locally so sampled datasets do not
// depend on the standard library's distribution implementation.
inline std::uint64_t uniform_below(std::mt19937_64& rng, std::uint64_t n) {
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = rng();
  while (x >= limit) x = rng();
  return x % n;
}

template <typename T>
void shuffle_in_place(std::vector<T>& items, std::mt19937_64& rng) {
  for (std::size_t i = items.size(); i > 1; --i) {
    std::swap(items[i - 1], items[uniform_below(rng, i)]);
  }
}

class KnowledgeGraph {
 public:
  static constexpr int kNoEdge = -1;

  KnowledgeGraph() = default;

  KnowledgeGraph(int num_entities, int num_relations, GraphKind kind,
                 std::vector<Fact> facts)
      : num_entities_(num_entities),
        num_relations_(num_relations),
        kind_(kind),
        facts_(std::move(facts)) {
    LOOPFORMER_CHECK(num_entities > 0 && num_relations > 0,
                     ErrorKind::kInvalidConfig, "graph counts must be positive");
    table_.assign(static_cast<std::size_t>(num_entities) * num_relations, kNoEdge);
    std::sort(facts_.begin(), facts_.end());
    for (const Fact& f : facts_) {
      LOOPFORMER_CHECK(in_range_entity(f.head) && in_range_entity(f.tail) &&
                           in_range_relation(f.relation),
                       ErrorKind::kOutOfRange, "fact id out of range");
      int& slot = table_[slot_index(f.head, f.relation)];
      LOOPFORMER_CHECK(slot == kNoEdge, ErrorKind::kInvalidConfig,
                       "relation is not functional: duplicate (head, relation)");
      slot = f.tail;
    }
    if (kind_ == GraphKind::kPermutation) {
      LOOPFORMER_CHECK(is_bijective(), ErrorKind::kInvalidConfig,
                       "permutation graph: some relation is not a bijection");
    }
  }

  int num_entities() const { return num_entities_; }
  int num_relations() const { return num_relations_; }
  GraphKind kind() const { return kind_; }
  const std::vector<Fact>& facts() const { return facts_; }

  bool in_range_entity(int e) const { return e >= 0 && e < num_entities_; }
  bool in_range_relation(int r) const { return r >= 0 && r < num_relations_; }

  // Tail of (head, relation), or kNoEdge.
  int tail(int head, int relation) const {
    return table_[slot_index(head, relation)];
  }

  std::size_t slot_index(int head, int relation) const {
    return static_cast<std::size_t>(head) * num_relations_ + relation;
  }

  bool contains(const Fact& f) const {
    return in_range_entity(f.head) && in_range_relation(f.relation) &&
           tail(f.head, f.relation) == f.tail;
  }

  // Every relation maps all entities one-to-one onto all entities.
  bool is_bijective() const {
    for (int r = 0; r < num_relations_; ++r) {
      std::vector<int> in_degree(num_entities_, 0);
      for (int h = 0; h < num_entities_; ++h) {
        const int t = tail(h, r);
        if (t == kNoEdge) return false;
        ++in_degree[t];
      }
      for (int d : in_degree) {
        if (d != 1) return false;
      }
    }
    return true;
  }

 private:
  int num_entities_ = 0;
  int num_relations_ = 0;
  GraphKind kind_ = GraphKind::kRandomFunctional;
  std::vector<Fact> facts_;
  std::vector<int> table_;
};

struct InferredFact {
  int head = 0;
  std::vector<int> relations;
  int tail = 0;

  int hops() const { return static_cast<int>(relations.size()); }
  bool operator==(const InferredFact&) const = default;
};

// (head, r_1..r_k) flattened; identifies a query independent of its answer.
using QueryKey = std::vector<int>;

inline QueryKey query_key(const InferredFact& f) {
  QueryKey key;
  key.reserve(f.relations.size() + 1);
  key.push_back(f.head);
  key.insert(key.end(), f.relations.begin(), f.relations.end());
  return key;
}

struct QueryKeyHash {
  std::size_t operator()(const QueryKey& key) const noexcept {
    std::uint64_t h = 1469598103934665603ULL;
    for (int v : key) {
      h ^= static_cast<std::uint32_t>(v);
      h *= 1099511628211ULL;
    }
    h ^= key.size();
    return static_cast<std::size_t>(h * 1099511628211ULL);
  }
};

using QuerySet = std::unordered_set<QueryKey, QueryKeyHash>;

inline void add_queries(QuerySet& set, std::span<const InferredFact> facts) {
  for (const auto& f : facts) set.insert(query_key(f));
}

// ---------------------------------------------------------------------------
// Graph generation

inline KnowledgeGraph generate_random_kg(int num_entities, int num_relations,
                                         int avg_out_degree, std::uint64_t seed) {
  LOOPFORMER_CHECK(num_entities > 0 && num_relations > 0 && avg_out_degree > 0,
                   ErrorKind::kInvalidConfig, "graph counts must be positive");
  LOOPFORMER_CHECK(avg_out_degree <= num_relations, ErrorKind::kInvalidConfig,
                   "avg_out_degree exceeds num_relations; functional graph impossible");
  std::mt19937_64 rng(seed);
  std::vector<int> relation_ids(num_relations);
  std::vector<Fact> facts;
  facts.reserve(static_cast<std::size_t>(num_entities) * avg_out_degree);
  for (int h = 0; h < num_entities; ++h) {
    std::iota(relation_ids.begin(), relation_ids.end(), 0);
    // Partial Fisher-Yates: the first avg_out_degree slots are a sample
    // without replacement.
    for (int i = 0; i < avg_out_degree; ++i) {
      const auto j = i + static_cast<int>(uniform_below(rng, num_relations - i));
      std::swap(relation_ids[i], relation_ids[j]);
      const int t = static_cast<int>(uniform_below(rng, num_entities));
      facts.push_back({h, relation_ids[i], t});
    }
  }
  return KnowledgeGraph(num_entities, num_relations, GraphKind::kRandomFunctional,
                        std::move(facts));
}

inline KnowledgeGraph generate_permutation_kg(int num_entities, int num_relations,
                                              std::uint64_t seed) {
  LOOPFORMER_CHECK(num_entities > 0 && num_relations > 0, ErrorKind::kInvalidConfig,
                   "graph counts must be positive");
  std::mt19937_64 rng(seed);
  std::vector<Fact> facts;
  facts.reserve(static_cast<std::size_t>(num_entities) * num_relations);
  std::vector<int> perm(num_entities);
  for (int r = 0; r < num_relations; ++r) {
    std::iota(perm.begin(), perm.end(), 0);
    shuffle_in_place(perm, rng);
    for (int h = 0; h < num_entities; ++h) facts.push_back({h, r, perm[h]});
  }
  return KnowledgeGraph(num_entities, num_relations, GraphKind::kPermutation,
                        std::move(facts));
}

// ---------------------------------------------------------------------------
// Oracle traversal

inline void check_query_ids(const KnowledgeGraph& kg, int head,
                            std::span<const int> relations) {
  LOOPFORMER_CHECK(kg.in_range_entity(head), ErrorKind::kOutOfRange,
                   "head entity out of range");
  for (int r : relations) {
    LOOPFORMER_CHECK(kg.in_range_relation(r), ErrorKind::kOutOfRange,
                     "relation out of range");
  }
}

// Endpoint of following `relations` from `head`; nullopt when a hop is missing.
inline std::optional<int> oracle_answer(const KnowledgeGraph& kg, int head,
                                        std::span<const int> relations) {
  check_query_ids(kg, head, relations);
  int current = head;
  for (int r : relations) {
    current = kg.tail(current, r);
    if (current == KnowledgeGraph::kNoEdge) return std::nullopt;
  }
  return current;
}

// Entities visited after each hop: element j is the entity reached after
// relation j, so the last element is the answer.
inline std::optional<std::vector<int>> oracle_path(const KnowledgeGraph& kg, int head,
                                                   std::span<const int> relations) {
  check_query_ids(kg, head, relations);
  std::vector<int> path;
  path.reserve(relations.size());
  int current = head;
  for (int r : relations) {
    current = kg.tail(current, r);
    if (current == KnowledgeGraph::kNoEdge) return std::nullopt;
    path.push_back(current);
  }
  return path;
}

// ---------------------------------------------------------------------------
// Atomic partition

struct AtomicPartition {
  std::vector<Fact> id_facts;
  std::vector<Fact> ood_facts;
};

inline AtomicPartition partition_atomic(const KnowledgeGraph& kg, double ood_fraction,
                                        std::uint64_t seed) {
  LOOPFORMER_CHECK(ood_fraction >= 0.0 && ood_fraction <= 1.0, ErrorKind::kInvalidConfig,
                   "ood_fraction must lie in [0, 1]");
  const auto& facts = kg.facts();
  const auto num_ood =
      static_cast<std::size_t>(std::llround(ood_fraction * static_cast<double>(facts.size())));
  std::vector<std::size_t> order(facts.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  shuffle_in_place(order, rng);
  std::vector<char> is_ood(facts.size(), 0);
  for (std::size_t i = 0; i < num_ood; ++i) is_ood[order[i]] = 1;
  AtomicPartition out;
  out.ood_facts.reserve(num_ood);
  out.id_facts.reserve(facts.size() - num_ood);
  for (std::size_t i = 0; i < facts.size(); ++i) {
    (is_ood[i] ? out.ood_facts : out.id_facts).push_back(facts[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Multi-hop sampling

namespace detail {

// Adjacency restricted to an allowed edge subset.
struct AllowedGraph {
  int num_entities = 0;
  std::vector<std::vector<std::pair<int, int>>> out;  // entity -> (relation, tail)
  std::vector<Fact> edges;

  AllowedGraph(const KnowledgeGraph& kg, std::span<const Fact> allowed)
      : num_entities(kg.num_entities()), out(kg.num_entities()) {
    std::vector<char> seen(static_cast<std::size_t>(kg.num_entities()) * kg.num_relations(), 0);
    for (const Fact& f : allowed) {
      LOOPFORMER_CHECK(kg.contains(f), ErrorKind::kInvalidConfig,
                       "allowed fact is not part of the graph");
      char& s = seen[kg.slot_index(f.head, f.relation)];
      if (s) continue;
      s = 1;
      edges.push_back(f);
    }
    std::sort(edges.begin(), edges.end());
    for (const Fact& f : edges) out[f.head].push_back({f.relation, f.tail});
  }

  // Number of length-k walks, saturated at `cap`.
  std::uint64_t count_walks(int k, std::uint64_t cap) const {
    std::vector<std::uint64_t> ways(num_entities, 1), next(num_entities);
    for (int step = 0; step < k; ++step) {
      for (int e = 0; e < num_entities; ++e) {
        std::uint64_t total = 0;
        for (const auto& [r, t] : out[e]) total = std::min(cap, total + ways[t]);
        next[e] = total;
      }
      ways.swap(next);
    }
    std::uint64_t total = 0;
    for (auto w : ways) total = std::min(cap, total + w);
    return total;
  }

  void enumerate(int k, std::vector<InferredFact>& sink) const {
    InferredFact current;
    current.relations.reserve(k);
    for (int h = 0; h < num_entities; ++h) {
      current.head = h;
      extend(h, k, current, sink);
    }
  }

  void extend(int at, int remaining, InferredFact& current,
              std::vector<InferredFact>& sink) const {
    if (remaining == 0) {
      current.tail = at;
      sink.push_back(current);
      return;
    }
    for (const auto& [r, t] : out[at]) {
      current.relations.push_back(r);
      extend(t, remaining - 1, current, sink);
      current.relations.pop_back();
    }
  }
};

inline constexpr std::uint64_t kEnumerateLimit = 4'000'000;

}  // namespace detail

// Distinct k-hop queries whose every hop lies in `allowed`, excluding the
// queries in `exclude`. Small query spaces are enumerated and shuffled;
// large ones are sampled by random walks (start at a uniformly chosen
// allowed edge, then follow a uniformly chosen outgoing allowed edge).
inline std::vector<InferredFact> sample_inferred_facts(const KnowledgeGraph& kg,
                                                       std::span<const Fact> allowed, int k,
                                                       std::size_t count,
                                                       const QuerySet& exclude,
                                                       std::uint64_t seed) {
  LOOPFORMER_CHECK(k >= 2, ErrorKind::kInvalidConfig, "inferred facts need k >= 2");
  const detail::AllowedGraph graph(kg, allowed);
  if (count == 0) return {};
  const std::uint64_t total = graph.count_walks(k, detail::kEnumerateLimit + 1);
  LOOPFORMER_CHECK(total > 0, ErrorKind::kExhaustedSampling,
                   "no valid " + std::to_string(k) + "-hop path in allowed facts");
  std::mt19937_64 rng(seed);
  std::vector<InferredFact> result;

  if (total <= detail::kEnumerateLimit) {
    std::vector<InferredFact> all;
    all.reserve(total);
    graph.enumerate(k, all);
    shuffle_in_place(all, rng);
    for (auto& f : all) {
      if (result.size() == count) break;
      if (!exclude.empty() && exclude.contains(query_key(f))) continue;
      result.push_back(std::move(f));
    }
    return result;
  }

  QuerySet seen;
  const std::uint64_t max_attempts = 64 * static_cast<std::uint64_t>(count) + 1'000'000;
  InferredFact walk;
  for (std::uint64_t attempt = 0; attempt < max_attempts && result.size() < count;
       ++attempt) {
    const Fact& start = graph.edges[uniform_below(rng, graph.edges.size())];
    walk.head = start.head;
    walk.relations.assign(1, start.relation);
    int at = start.tail;
    bool dead_end = false;
    for (int hop = 1; hop < k; ++hop) {
      const auto& choices = graph.out[at];
      if (choices.empty()) {
        dead_end = true;
        break;
      }
      const auto& [r, t] = choices[uniform_below(rng, choices.size())];
      walk.relations.push_back(r);
      at = t;
    }
    if (dead_end) continue;
    walk.tail = at;
    QueryKey key = query_key(walk);
    if (exclude.contains(key) || !seen.insert(std::move(key)).second) continue;
    result.push_back(walk);
  }
  return result;
}

// ---------------------------------------------------------------------------
// Token encoding. Entities occupy [0, |E|), relations [|E|, |E|+|R|), and the
// pad token is |E|+|R|.

struct EncodedExample {
  std::vector<int> input;
  int target = 0;
};

struct Vocabulary {
  int num_entities = 0;
  int num_relations = 0;

  int relation_token(int r) const { return num_entities + r; }
  int pad_token() const { return num_entities + num_relations; }
  int size() const { return num_entities + num_relations + 1; }
  bool is_entity(int token) const { return token >= 0 && token < num_entities; }
};

inline EncodedExample encode_example(const InferredFact& fact, int num_entities) {
  EncodedExample out;
  out.input.reserve(fact.relations.size() + 1);
  out.input.push_back(fact.head);
  for (int r : fact.relations) out.input.push_back(num_entities + r);
  out.target = fact.tail;
  return out;
}

inline InferredFact decode_example(const EncodedExample& ex, const Vocabulary& vocab) {
  LOOPFORMER_CHECK(!ex.input.empty() && vocab.is_entity(ex.input.front()) &&
                       vocab.is_entity(ex.target),
                   ErrorKind::kFormat, "malformed encoded example");
  InferredFact f;
  f.head = ex.input.front();
  for (std::size_t i = 1; i < ex.input.size(); ++i) {
    const int r = ex.input[i] - vocab.num_entities;
    LOOPFORMER_CHECK(r >= 0 && r < vocab.num_relations, ErrorKind::kFormat,
                     "token is not a relation");
    f.relations.push_back(r);
  }
  f.tail = ex.target;
  return f;
}

inline std::vector<EncodedExample> encode_all(std::span<const InferredFact> facts,
                                              int num_entities) {
  std::vector<EncodedExample> out;
  out.reserve(facts.size());
  for (const auto& f : facts) out.push_back(encode_example(f, num_entities));
  return out;
}

inline InferredFact atomic_as_query(const Fact& f) { return {f.head, {f.relation}, f.tail}; }

// ---------------------------------------------------------------------------
// Dataset assembly

enum class Experiment { kSystematicity, kExtrapolation };

inline std::string_view to_string(Experiment e) {
  return e == Experiment::kSystematicity ? "systematicity" : "extrapolation";
}

struct DatasetConfig {
  Experiment experiment = Experiment::kSystematicity;
  int num_entities = 2000;
  int num_relations = 200;
  int avg_out_degree = 20;
  double ood_fraction = 0.05;
  // Systematicity sizes.
  std::size_t train_inferred_count = 273'600;
  std::size_t test_id_count = 3'000;
  std::size_t test_ood_count = 2'000;
  // Extrapolation sizes.
  int max_hops = 40;
  std::size_t train_per_hop = 15'000;
  std::size_t test_per_hop = 750;
  std::uint64_t seed = 0;

  static DatasetConfig systematicity() { return {}; }

  static DatasetConfig extrapolation() {
    DatasetConfig c;
    c.experiment = Experiment::kExtrapolation;
    c.num_entities = 200;
    c.num_relations = 10;
    c.avg_out_degree = 10;
    c.ood_fraction = 0.0;
    return c;
  }
};

using HopSplits = std::map<int, std::vector<InferredFact>>;

struct DatasetBundle {
  DatasetConfig config;
  KnowledgeGraph kg;
  AtomicPartition partition;
  std::vector<InferredFact> train_atomic;
  HopSplits train_inferred;
  HopSplits test_id;
  // Systematicity only: paths built purely from C_OOD edges.
  HopSplits test_ood;

  Vocabulary vocab() const { return {kg.num_entities(), kg.num_relations()}; }
  int vocab_size() const { return vocab().size(); }
};

inline DatasetBundle build_dataset(const DatasetConfig& config) {
  DatasetBundle b;
  b.config = config;
  const auto take = [](std::vector<InferredFact> facts, std::size_t want,
                       const std::string& what) {
    LOOPFORMER_CHECK(facts.size() == want, ErrorKind::kExhaustedSampling,
                     what + ": requested " + std::to_string(want) + " distinct queries, only " +
                         std::to_string(facts.size()) + " available");
    return facts;
  };

  if (config.experiment == Experiment::kSystematicity) {
    b.kg = generate_random_kg(config.num_entities, config.num_relations,
                              config.avg_out_degree, mix_seed(config.seed, 1));
    b.partition = partition_atomic(b.kg, config.ood_fraction, mix_seed(config.seed, 2));
    for (const Fact& f : b.kg.facts()) b.train_atomic.push_back(atomic_as_query(f));

    QuerySet used;
    b.train_inferred[2] =
        take(sample_inferred_facts(b.kg, b.partition.id_facts, 2, config.train_inferred_count,
                                   used, mix_seed(config.seed, 3)),
             config.train_inferred_count, "train 2-hop");
    add_queries(used, b.train_inferred[2]);
    b.test_id[2] = take(sample_inferred_facts(b.kg, b.partition.id_facts, 2,
                                              config.test_id_count, used,
                                              mix_seed(config.seed, 4)),
                        config.test_id_count, "test_id 2-hop");
    add_queries(used, b.test_id[2]);
    if (config.test_ood_count > 0 && !b.partition.ood_facts.empty()) {
      // The realized OOD count depends on the partition; no exact-size check,
      // and a partition with no OOD 2-hop path leaves the split empty.
      try {
        b.test_ood[2] = sample_inferred_facts(b.kg, b.partition.ood_facts, 2,
                                              config.test_ood_count, used,
                                              mix_seed(config.seed, 5));
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kExhaustedSampling) throw;
        b.test_ood[2] = {};
      }
    }
    return b;
  }

  LOOPFORMER_CHECK(config.max_hops >= 2, ErrorKind::kInvalidConfig, "max_hops must be >= 2");
  b.kg = generate_permutation_kg(config.num_entities, config.num_relations,
                                 mix_seed(config.seed, 1));
  b.partition.id_facts = b.kg.facts();
  for (const Fact& f : b.kg.facts()) b.train_atomic.push_back(atomic_as_query(f));
  for (int k = 2; k <= config.max_hops; ++k) {
    QuerySet used;
    b.train_inferred[k] =
        take(sample_inferred_facts(b.kg, b.kg.facts(), k, config.train_per_hop, used,
                                   mix_seed(config.seed, 100 + 2 * k)),
             config.train_per_hop, "train " + std::to_string(k) + "-hop");
    add_queries(used, b.train_inferred[k]);
    b.test_id[k] = take(sample_inferred_facts(b.kg, b.kg.facts(), k, config.test_per_hop,
                                              used, mix_seed(config.seed, 101 + 2 * k)),
                        config.test_per_hop, "test " + std::to_string(k) + "-hop");
  }
  return b;
}

// ---------------------------------------------------------------------------
// Line-delimited dataset files.
//
//   # loopformer-dataset num_entities=E num_relations=R kind=K seed=S split=X hops=k count=N
//   atomic 3 7 12
//   inferred 5 2 7 9

struct SplitHeader {
  int num_entities = 0;
  int num_relations = 0;
  GraphKind kind = GraphKind::kRandomFunctional;
  std::uint64_t seed = 0;
  std::string split;
  int hops = 0;
  std::size_t count = 0;
};

struct SplitFile {
  SplitHeader header;
  std::vector<InferredFact> facts;
};

inline void write_split(const std::filesystem::path& path, const SplitHeader& header,
                        std::span<const InferredFact> facts) {
  std::ofstream out(path, std::ios::binary);
  LOOPFORMER_CHECK(out.good(), ErrorKind::kIo, "cannot open " + path.string());
  out << "# loopformer-dataset num_entities=" << header.num_entities
      << " num_relations=" << header.num_relations << " kind=" << to_string(header.kind)
      << " seed=" << header.seed << " split=" << header.split << " hops=" << header.hops
      << " count=" << facts.size() << '\n';
  for (const auto& f : facts) {
    out << (f.hops() == 1 ? "atomic" : "inferred") << ' ' << f.head;
    for (int r : f.relations) out << ' ' << r;
    out << ' ' << f.tail << '\n';
  }
  LOOPFORMER_CHECK(out.good(), ErrorKind::kIo, "write failed: " + path.string());
}

inline SplitFile read_split(const std::filesystem::path& path) {
  std::ifstream in(path);
  LOOPFORMER_CHECK(in.good(), ErrorKind::kIo, "cannot open " + path.string());
  SplitFile file;
  std::string line;
  LOOPFORMER_CHECK(static_cast<bool>(std::getline(in, line)) &&
                       line.rfind("# loopformer-dataset", 0) == 0,
                   ErrorKind::kFormat, path.string() + ": missing dataset header");
  bool has_count = false;
  {
    std::istringstream fields(line.substr(20));
    std::string field;
    while (fields >> field) {
      const auto eq = field.find('=');
      LOOPFORMER_CHECK(eq != std::string::npos, ErrorKind::kFormat,
                       path.string() + ": bad header field '" + field + "'");
      const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
      if (key == "num_entities") file.header.num_entities = std::stoi(value);
      else if (key == "num_relations") file.header.num_relations = std::stoi(value);
      else if (key == "kind") file.header.kind = parse_graph_kind(value);
      else if (key == "seed") file.header.seed = std::stoull(value);
      else if (key == "split") file.header.split = value;
      else if (key == "hops") file.header.hops = std::stoi(value);
      else if (key == "count") {
        file.header.count = std::stoull(value);
        has_count = true;
      }
    }
  }
  LOOPFORMER_CHECK(has_count && file.header.num_entities > 0 && file.header.num_relations > 0,
                   ErrorKind::kFormat, path.string() + ": incomplete header");
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream rec(line);
    std::string kind;
    rec >> kind;
    std::vector<long long> ids;
    long long v;
    while (rec >> v) ids.push_back(v);
    LOOPFORMER_CHECK((kind == "atomic" || kind == "inferred") && ids.size() >= 3 && rec.eof(),
                     ErrorKind::kFormat,
                     path.string() + ":" + std::to_string(line_no) + ": malformed record");
    InferredFact f;
    f.head = static_cast<int>(ids.front());
    f.tail = static_cast<int>(ids.back());
    for (std::size_t i = 1; i + 1 < ids.size(); ++i) f.relations.push_back(static_cast<int>(ids[i]));
    LOOPFORMER_CHECK((kind == "atomic") == (f.hops() == 1), ErrorKind::kFormat,
                     path.string() + ":" + std::to_string(line_no) + ": record kind/hops mismatch");
    file.facts.push_back(std::move(f));
  }
  LOOPFORMER_CHECK(file.facts.size() == file.header.count, ErrorKind::kFormat,
                   path.string() + ": header count does not match records");
  return file;
}

inline std::string split_file_name(std::string_view split, int hops) {
  return std::string(split) + "_k" + std::to_string(hops) + ".txt";
}

// Writes one file per split per hop level; returns the paths written.
inline std::vector<std::filesystem::path> write_dataset(const DatasetBundle& b,
                                                        const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> written;
  SplitHeader h;
  h.num_entities = b.kg.num_entities();
  h.num_relations = b.kg.num_relations();
  h.kind = b.kg.kind();
  h.seed = b.config.seed;
  const auto emit = [&](std::string_view split, int hops, std::span<const InferredFact> facts) {
    h.split = std::string(split);
    h.hops = hops;
    h.count = facts.size();
    written.push_back(dir / split_file_name(split, hops));
    write_split(written.back(), h, facts);
  };
  emit("atomic", 1, b.train_atomic);
  if (!b.partition.ood_facts.empty()) {
    std::vector<InferredFact> ood;
    for (const Fact& f : b.partition.ood_facts) ood.push_back(atomic_as_query(f));
    emit("atomic_ood", 1, ood);
  }
  for (const auto& [k, facts] : b.train_inferred) emit("train", k, facts);
  for (const auto& [k, facts] : b.test_id) emit("test_id", k, facts);
  for (const auto& [k, facts] : b.test_ood) emit("test_ood", k, facts);
  return written;
}

// Inverse of write_dataset. Split sizes in the returned config mirror the
// files; other config fields keep their defaults.
inline DatasetBundle read_dataset(const std::filesystem::path& dir) {
  DatasetBundle b;
  const SplitFile atomic = read_split(dir / split_file_name("atomic", 1));
  std::vector<Fact> facts;
  for (const auto& f : atomic.facts) facts.push_back({f.head, f.relations.front(), f.tail});
  b.kg = KnowledgeGraph(atomic.header.num_entities, atomic.header.num_relations,
                        atomic.header.kind, facts);
  b.train_atomic = atomic.facts;
  b.config.seed = atomic.header.seed;
  b.config.num_entities = atomic.header.num_entities;
  b.config.num_relations = atomic.header.num_relations;
  b.config.experiment = atomic.header.kind == GraphKind::kPermutation
                            ? Experiment::kExtrapolation
                            : Experiment::kSystematicity;

  std::vector<char> is_ood(b.kg.facts().size(), 0);
  if (std::filesystem::exists(dir / split_file_name("atomic_ood", 1))) {
    for (const auto& f : read_split(dir / split_file_name("atomic_ood", 1)).facts) {
      const Fact fact{f.head, f.relations.front(), f.tail};
      const auto it = std::lower_bound(b.kg.facts().begin(), b.kg.facts().end(), fact);
      LOOPFORMER_CHECK(it != b.kg.facts().end() && *it == fact, ErrorKind::kFormat,
                       "atomic_ood fact missing from atomic file");
      is_ood[it - b.kg.facts().begin()] = 1;
    }
  }
  for (std::size_t i = 0; i < b.kg.facts().size(); ++i) {
    (is_ood[i] ? b.partition.ood_facts : b.partition.id_facts).push_back(b.kg.facts()[i]);
  }

  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    int k = 0;
    HopSplits* target = nullptr;
    for (auto [prefix, split] : {std::pair<std::string_view, HopSplits*>{"train_k", &b.train_inferred},
                                 {"test_id_k", &b.test_id},
                                 {"test_ood_k", &b.test_ood}}) {
      if (name.rfind(prefix, 0) == 0 && name.ends_with(".txt")) {
        k = std::stoi(name.substr(prefix.size()));
        target = split;
      }
    }
    if (target == nullptr) continue;
    (*target)[k] = read_split(entry.path()).facts;
  }
  return b;
}

}  // namespace loopformer
