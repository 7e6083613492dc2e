#include "ftpg/encoders.hpp"

#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "ftpg/random.hpp"

namespace ftpg {

namespace {

constexpr std::array<char, 8> kStoreMagic = {'F', 'T', 'P', 'G', 'E', 'M', 'B', '1'};
constexpr std::uint32_t kStoreVersion = 1;

Vector gaussian_vector(SplitMix64& rng, Eigen::Index n) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.gaussian();
  return v;
}

template <typename T>
T to_little(T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto bytes = std::bit_cast<std::array<unsigned char, sizeof(T)>>(v);
    std::reverse(bytes.begin(), bytes.end());
    return std::bit_cast<T>(bytes);
  }
  return v;
}

class Writer {
 public:
  explicit Writer(const std::filesystem::path& path) : out_(path, std::ios::binary) {
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
  }
  template <typename T>
  void put(T v) {
    v = to_little(v);
    out_.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void put_bytes(const char* data, std::size_t n) { out_.write(data, static_cast<std::streamsize>(n)); }
  void put_string(const std::string& s) {
    put(static_cast<std::uint32_t>(s.size()));
    put_bytes(s.data(), s.size());
  }
  void put_floats(const double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) put(static_cast<float>(data[i]));
  }
  void finish(const std::filesystem::path& path) {
    out_.flush();
    if (!out_) throw IoError("write failed for " + path.string());
  }

 private:
  std::ofstream out_;
};

class Reader {
 public:
  explicit Reader(const std::filesystem::path& path) : in_(path, std::ios::binary) {
    if (!in_) throw IoError("cannot open " + path.string());
  }
  void get_bytes(char* data, std::size_t n) {
    in_.read(data, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw IoError("truncated store", offset_ + in_.gcount());
    offset_ += n;
  }
  template <typename T>
  T get() {
    T v;
    get_bytes(reinterpret_cast<char*>(&v), sizeof(T));
    return to_little(v);
  }
  std::string get_string() {
    const auto len = get<std::uint32_t>();
    std::string s(len, '\0');
    get_bytes(s.data(), len);
    return s;
  }
  void get_floats(double* data, Eigen::Index n) {
    for (Eigen::Index i = 0; i < n; ++i) data[i] = static_cast<double>(get<float>());
  }
  bool at_end() { return in_.peek() == std::ifstream::traits_type::eof(); }
  std::uint64_t offset() const { return offset_; }

 private:
  std::ifstream in_;
  std::uint64_t offset_ = 0;
};

}  // namespace

Matrix round_to_float(const Matrix& m) { return m.cast<float>().cast<double>(); }
Vector round_to_float(const Vector& v) { return v.cast<float>().cast<double>(); }

std::size_t EmbeddingStore::num_classes() const {
  std::size_t n = 0;
  for (const auto& ds : datasets) n += ds.classes.size();
  return n;
}

std::size_t EmbeddingStore::num_train_images() const {
  std::size_t n = 0;
  for (const auto& ds : datasets)
    for (const auto& c : ds.classes) n += static_cast<std::size_t>(c.train_images.rows());
  return n;
}

std::size_t EmbeddingStore::num_eval_images() const {
  std::size_t n = 0;
  for (const auto& ds : datasets)
    for (const auto& c : ds.classes) n += static_cast<std::size_t>(c.eval_images.rows());
  return n;
}

namespace {

bool same_bits(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         (a.size() == 0 || std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

}  // namespace

bool operator==(const EmbeddingStore& a, const EmbeddingStore& b) {
  if (a.dim != b.dim || a.prompt_len != b.prompt_len || a.encoder_seed != b.encoder_seed ||
      a.datasets.size() != b.datasets.size())
    return false;
  for (std::size_t i = 0; i < a.datasets.size(); ++i) {
    const auto& da = a.datasets[i];
    const auto& db = b.datasets[i];
    if (da.name != db.name || da.classes.size() != db.classes.size()) return false;
    for (std::size_t j = 0; j < da.classes.size(); ++j) {
      const auto& ca = da.classes[j];
      const auto& cb = db.classes[j];
      if (ca.name != cb.name || ca.split != cb.split || ca.token.size() != cb.token.size() ||
          std::memcmp(ca.token.data(), cb.token.data(), sizeof(double) * ca.token.size()) != 0 ||
          !same_bits(ca.train_images, cb.train_images) || !same_bits(ca.eval_images, cb.eval_images))
        return false;
    }
  }
  return true;
}

void validate_store(const EmbeddingStore& store, double norm_tolerance) {
  if (store.dim == 0) throw FormatError("store: dimension is zero");
  if (store.datasets.empty()) throw FormatError("store: no datasets");
  for (const auto& ds : store.datasets) {
    if (ds.classes.empty()) throw FormatError("store: dataset '" + ds.name + "' has no classes");
    for (const auto& c : ds.classes) {
      const std::string where = "store: class '" + c.name + "' of '" + ds.name + "'";
      if (c.token.size() != store.dim) throw FormatError(where + " token has wrong length");
      if (c.train_images.rows() + c.eval_images.rows() == 0)
        throw DataError(where + " has no images");
      if ((c.train_images.rows() > 0 && c.train_images.cols() != store.dim) ||
          (c.eval_images.rows() > 0 && c.eval_images.cols() != store.dim))
        throw FormatError(where + " image width differs from store dimension");
      if (!c.token.allFinite() || !c.train_images.allFinite() || !c.eval_images.allFinite())
        throw DataError(where + " has non-finite entries");
      if (std::abs(c.token.norm() - 1.0) > norm_tolerance)
        throw DataError(where + " token is not unit norm");
    }
  }
}

void validate(const SynthConfig& cfg) {
  if (cfg.num_datasets < 1 || cfg.classes_per_dataset < 1 || cfg.train_shots < 1 ||
      cfg.eval_images_per_class < 1)
    throw ConfigError("synth: all counts must be >= 1");
  if (cfg.dim < 1 || cfg.prompt_len < 1) throw ConfigError("synth: dim and prompt_len must be >= 1");
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("synth: noise_sigma must be >= 0");
  if (!(cfg.dataset_context_spread >= 0.0) || !(cfg.domain_shift >= 0.0))
    throw ConfigError("synth: spread and domain_shift must be >= 0");
}

SurrogateEncoder::SurrogateEncoder(std::uint64_t seed, std::uint32_t prompt_len, std::uint32_t dim)
    : seed_(seed), m_(prompt_len), d_(dim) {
  if (m_ == 0 || d_ == 0) throw ConfigError("encoder: prompt length and dimension must be >= 1");
  const Eigen::Index d = d_;
  const Eigen::Index md = static_cast<Eigen::Index>(m_) * d;
  auto rng = make_stream(seed, Stream::encoder, {m_, d_});
  weight_.resize(d, md + d);
  const double token_scale = 1.0 / std::sqrt(static_cast<double>(d));
  const double prompt_scale = kPromptGain / std::sqrt(static_cast<double>(md));
  for (Eigen::Index i = 0; i < d; ++i)
    for (Eigen::Index j = 0; j < md + d; ++j)
      weight_(i, j) = rng.gaussian() * (j < md ? prompt_scale : token_scale);
  bias_.resize(d);
  for (Eigen::Index j = 0; j < d; ++j) bias_(j) = rng.gaussian() * token_scale;
  prompt_block_ = weight_.leftCols(md);
  token_block_ = weight_.rightCols(d);
}

void SurrogateEncoder::check_prompts(const Matrix& prompts) const {
  if (prompts.rows() != m_ || prompts.cols() != d_)
    throw ShapeError("surrogate encoder: prompts are " + detail::shape_of(prompts) + ", expected " +
                     std::to_string(m_) + "x" + std::to_string(d_));
}

Matrix SurrogateEncoder::encode(const Matrix& prompts, const Matrix& tokens) const {
  check_prompts(prompts);
  if (tokens.cols() != d_) detail::throw_shape("surrogate encoder tokens", tokens, token_block_);
  const Matrix flat = prompts.reshaped<Eigen::RowMajor>(1, prompts.size());
  const Matrix shift = ftpg::matmul_nt(flat, prompt_block_) + bias_;
  const Matrix base = ftpg::matmul_nt(tokens, token_block_);
  return base.rowwise() + shift.row(0);
}

Var SurrogateEncoder::encode(GradTape& tape, Var prompts, const Matrix& tokens) const {
  check_prompts(tape.value(prompts));
  if (tokens.cols() != d_) detail::throw_shape("surrogate encoder tokens", tokens, token_block_);
  const Var flat = tape.reshape(prompts, 1, static_cast<Eigen::Index>(m_) * d_);
  const Var shift = tape.add(tape.matmul_nt(flat, tape.constant(prompt_block_)),
                             tape.constant(Matrix(bias_)));
  const Var base = tape.constant(ftpg::matmul_nt(tokens, token_block_));
  return tape.add_row(base, shift);
}

Vector surrogate_encode(const SurrogateEncoder& enc, const Matrix& prompts, const Vector& token) {
  if (token.size() != enc.dim())
    throw ShapeError("surrogate_encode: token length " + std::to_string(token.size()) +
                     " differs from encoder dimension " + std::to_string(enc.dim()));
  const Matrix tokens = token.transpose();
  return enc.encode(prompts, tokens).row(0).transpose();
}

Matrix handcrafted_prompts(const SurrogateEncoder& enc) {
  auto rng = make_stream(enc.seed(), Stream::handcrafted, {enc.prompt_len(), enc.dim()});
  Matrix p(enc.prompt_len(), enc.dim());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    for (Eigen::Index j = 0; j < p.cols(); ++j) p(i, j) = rng.gaussian();
    p.row(i).normalize();
  }
  return p;
}

EmbeddingStore synth_world(const SynthConfig& cfg) {
  validate(cfg);
  const SurrogateEncoder enc(cfg.encoder_seed, cfg.prompt_len, cfg.dim);
  const Matrix handcrafted = handcrafted_prompts(enc);
  const Eigen::Index d = cfg.dim;
  const double unit = 1.0 / std::sqrt(static_cast<double>(d));

  EmbeddingStore store;
  store.dim = cfg.dim;
  store.prompt_len = cfg.prompt_len;
  store.encoder_seed = cfg.encoder_seed;
  auto rng = make_stream(cfg.seed, Stream::world);
  const int base_count = (cfg.classes_per_dataset + 1) / 2;

  for (int k = 0; k < cfg.num_datasets; ++k) {
    DatasetEntry ds;
    ds.name = "ds" + std::to_string(k);
    const Vector centroid = gaussian_vector(rng, d).normalized();
    const Vector style = gaussian_vector(rng, d) * unit;

    Matrix tokens(cfg.classes_per_dataset, d);
    for (int c = 0; c < cfg.classes_per_dataset; ++c) {
      const Vector raw = centroid + cfg.dataset_context_spread * unit * gaussian_vector(rng, d);
      tokens.row(c) = round_to_float(Vector(raw.normalized())).transpose();
    }
    const Matrix anchors = enc.encode(handcrafted, tokens);

    auto draw_images = [&](Eigen::Index c, int count) {
      Matrix images(count, d);
      for (int i = 0; i < count; ++i) {
        const Vector noise = gaussian_vector(rng, d) * unit + cfg.domain_shift * style;
        const Vector x = anchors.row(c).transpose() + cfg.noise_sigma * noise;
        images.row(i) = x.normalized().transpose();
      }
      return round_to_float(images);
    };

    for (int c = 0; c < cfg.classes_per_dataset; ++c) {
      ClassEntry entry;
      char name[32];
      std::snprintf(name, sizeof(name), "ds%d_c%03d", k, c);
      entry.name = name;
      entry.split = c < base_count ? Split::base : Split::novel;
      entry.token = tokens.row(c).transpose();
      entry.train_images = draw_images(c, cfg.train_shots);
      entry.eval_images = draw_images(c, cfg.eval_images_per_class);
      ds.classes.push_back(std::move(entry));
    }
    store.datasets.push_back(std::move(ds));
  }
  return store;
}

Matrix token_matrix(const DatasetEntry& dataset, const std::vector<int>& class_indices) {
  if (class_indices.empty()) throw DataError("token_matrix: no classes selected");
  const Eigen::Index d = dataset.classes.at(static_cast<std::size_t>(class_indices.front())).token.size();
  Matrix t(static_cast<Eigen::Index>(class_indices.size()), d);
  for (std::size_t i = 0; i < class_indices.size(); ++i)
    t.row(static_cast<Eigen::Index>(i)) =
        dataset.classes.at(static_cast<std::size_t>(class_indices[i])).token.transpose();
  return t;
}

std::uint64_t store_file_size(const EmbeddingStore& store) {
  std::uint64_t bytes = 8 + 4 + 4 + 4 + 8 + 4;
  for (const auto& ds : store.datasets) {
    bytes += 4 + ds.name.size() + 4;
    for (const auto& c : ds.classes) bytes += 4 + c.name.size() + 1 + 4 + 4;
  }
  const std::uint64_t vectors = store.num_classes() + store.num_train_images() + store.num_eval_images();
  return bytes + 4ULL * store.dim * vectors;
}

void save_store(const EmbeddingStore& store, const std::filesystem::path& path) {
  Writer w(path);
  w.put_bytes(kStoreMagic.data(), kStoreMagic.size());
  w.put(kStoreVersion);
  w.put(store.dim);
  w.put(store.prompt_len);
  w.put(store.encoder_seed);
  w.put(static_cast<std::uint32_t>(store.datasets.size()));
  for (const auto& ds : store.datasets) {
    w.put_string(ds.name);
    w.put(static_cast<std::uint32_t>(ds.classes.size()));
    for (const auto& c : ds.classes) {
      w.put_string(c.name);
      w.put(static_cast<std::uint8_t>(c.split));
      w.put(static_cast<std::uint32_t>(c.train_images.rows()));
      w.put(static_cast<std::uint32_t>(c.eval_images.rows()));
    }
  }
  for (const auto& ds : store.datasets)
    for (const auto& c : ds.classes) w.put_floats(c.token.data(), c.token.size());
  for (const auto& ds : store.datasets) {
    for (const auto& c : ds.classes) {
      w.put_floats(c.train_images.data(), c.train_images.size());
      w.put_floats(c.eval_images.data(), c.eval_images.size());
    }
  }
  w.finish(path);
}

EmbeddingStore load_store(const std::filesystem::path& path) {
  Reader r(path);
  std::array<char, 8> magic{};
  r.get_bytes(magic.data(), magic.size());
  if (magic != kStoreMagic) throw FormatError(path.string() + ": bad magic, not an FTPGEMB1 store");
  const auto version = r.get<std::uint32_t>();
  if (version != kStoreVersion)
    throw FormatError(path.string() + ": unsupported store version " + std::to_string(version));

  EmbeddingStore store;
  store.dim = r.get<std::uint32_t>();
  store.prompt_len = r.get<std::uint32_t>();
  store.encoder_seed = r.get<std::uint64_t>();
  const auto num_datasets = r.get<std::uint32_t>();
  struct Counts {
    std::uint32_t train, eval;
  };
  std::vector<std::vector<Counts>> counts(num_datasets);
  for (std::uint32_t k = 0; k < num_datasets; ++k) {
    DatasetEntry ds;
    ds.name = r.get_string();
    const auto num_classes = r.get<std::uint32_t>();
    for (std::uint32_t c = 0; c < num_classes; ++c) {
      ClassEntry entry;
      entry.name = r.get_string();
      const auto flag = r.get<std::uint8_t>();
      if (flag > 1)
        throw FormatError(path.string() + ": invalid split flag " + std::to_string(flag) +
                          " at byte offset " + std::to_string(r.offset() - 1));
      entry.split = static_cast<Split>(flag);
      const auto train = r.get<std::uint32_t>();
      const auto eval = r.get<std::uint32_t>();
      counts[k].push_back({train, eval});
      ds.classes.push_back(std::move(entry));
    }
    store.datasets.push_back(std::move(ds));
  }
  const Eigen::Index d = store.dim;
  for (auto& ds : store.datasets) {
    for (auto& c : ds.classes) {
      c.token.resize(d);
      r.get_floats(c.token.data(), d);
    }
  }
  for (std::size_t k = 0; k < store.datasets.size(); ++k) {
    for (std::size_t c = 0; c < store.datasets[k].classes.size(); ++c) {
      auto& entry = store.datasets[k].classes[c];
      entry.train_images.resize(counts[k][c].train, d);
      r.get_floats(entry.train_images.data(), entry.train_images.size());
      entry.eval_images.resize(counts[k][c].eval, d);
      r.get_floats(entry.eval_images.data(), entry.eval_images.size());
    }
  }
  if (!r.at_end()) throw FormatError(path.string() + ": trailing bytes after payload at byte offset " +
                                     std::to_string(r.offset()));
  validate_store(store);
  return store;
}

}  // namespace ftpg
