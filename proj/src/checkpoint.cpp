#include "backflush/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace backflush {
namespace {

constexpr std::array<char, 4> kMagic = {'B', 'F', 'C', 'K'};

static_assert(std::endian::native == std::endian::little, "checkpoint io assumes a little-endian host");

void put_u64(std::ostream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); }

std::uint64_t get_u64(std::istream& in) {
  std::uint64_t v = 0;
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw std::runtime_error("truncated checkpoint");
  return v;
}

void put_string(std::ostream& out, std::string_view s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& in) {
  const auto n = get_u64(in);
  if (n > (1u << 20)) throw std::runtime_error("corrupt checkpoint string length");
  std::string s(n, '\0');
  if (!in.read(s.data(), static_cast<std::streamsize>(n))) throw std::runtime_error("truncated checkpoint");
  return s;
}

}  // namespace

std::string_view to_string(Provenance p) {
  switch (p) {
    case Provenance::Clean: return "clean";
    case Provenance::Watermarked: return "watermarked";
    case Provenance::Poisoned: return "poisoned";
    case Provenance::Edited: return "edited";
    case Provenance::Intermediate: return "intermediate";
    case Provenance::Purified: return "purified";
  }
  return "unknown";
}

Provenance provenance_from_string(std::string_view name) {
  for (Provenance p : {Provenance::Clean, Provenance::Watermarked, Provenance::Poisoned, Provenance::Edited,
                       Provenance::Intermediate, Provenance::Purified}) {
    if (to_string(p) == name) return p;
  }
  throw std::invalid_argument("unknown provenance '" + std::string(name) + "'");
}

bool can_transition(Provenance from, Provenance to) {
  switch (to) {
    case Provenance::Clean: return false;
    case Provenance::Watermarked: return from == Provenance::Clean || from == Provenance::Watermarked;
    case Provenance::Poisoned:
    case Provenance::Edited:
      return from != Provenance::Intermediate && from != Provenance::Purified;
    case Provenance::Intermediate: return from != Provenance::Intermediate && from != Provenance::Purified;
    case Provenance::Purified: return from == Provenance::Intermediate;
  }
  return false;
}

ModelCheckpoint ModelCheckpoint::initialise(const ModelConfig& config) {
  ModelCheckpoint m;
  m.config = config;
  m.params = init_parameters<Real>(config);
  m.lineage.push_back("init");
  return m;
}

void ModelCheckpoint::advance(Provenance to, std::string_view operation) {
  if (!can_transition(provenance, to)) {
    throw std::logic_error("illegal provenance transition " + std::string(to_string(provenance)) + " -> " +
                           std::string(to_string(to)) + " in " + std::string(operation));
  }
  provenance = to;
  lineage.emplace_back(operation);
}

bool ModelCheckpoint::all_finite() const {
  for (const auto& v : params.values)
    if (!v.allFinite()) return false;
  return true;
}

void write_checkpoint(std::ostream& out, const ModelCheckpoint& m) {
  out.write(kMagic.data(), kMagic.size());
  out.put(static_cast<char>(kCheckpointVersion));
  const auto& c = m.config;
  for (std::int64_t v : {std::int64_t{c.vocab_size}, std::int64_t{c.dim}, std::int64_t{c.n_layers},
                         std::int64_t{c.n_heads}, std::int64_t{c.context_len}, std::int64_t{c.mlp_ratio}})
    put_u64(out, static_cast<std::uint64_t>(v));
  put_u64(out, c.seed);
  put_string(out, to_string(m.provenance));
  put_u64(out, m.lineage.size());
  for (const auto& s : m.lineage) put_string(out, s);
  put_u64(out, m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const auto& v = m.params.values[i];
    put_string(out, m.params.names[i]);
    put_u64(out, static_cast<std::uint64_t>(v.rows()));
    put_u64(out, static_cast<std::uint64_t>(v.cols()));
    out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Real)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint");
}

ModelCheckpoint read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) throw std::runtime_error("not a checkpoint file");
  const int version = in.get();
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  ModelCheckpoint m;
  auto& c = m.config;
  c.vocab_size = static_cast<int>(get_u64(in));
  c.dim = static_cast<int>(get_u64(in));
  c.n_layers = static_cast<int>(get_u64(in));
  c.n_heads = static_cast<int>(get_u64(in));
  c.context_len = static_cast<int>(get_u64(in));
  c.mlp_ratio = static_cast<int>(get_u64(in));
  c.seed = get_u64(in);
  c.validate();
  m.provenance = provenance_from_string(get_string(in));
  const auto n_lineage = get_u64(in);
  for (std::uint64_t i = 0; i < n_lineage; ++i) m.lineage.push_back(get_string(in));
  const auto n_params = get_u64(in);
  const auto expected = parameter_names(c);
  if (n_params != expected.size()) throw std::runtime_error("checkpoint parameter count does not match its config");
  for (std::uint64_t i = 0; i < n_params; ++i) {
    auto name = get_string(in);
    if (name != expected[i]) throw std::runtime_error("unexpected parameter '" + name + "'");
    const auto rows = static_cast<Eigen::Index>(get_u64(in));
    const auto cols = static_cast<Eigen::Index>(get_u64(in));
    Matrix<Real> v(rows, cols);
    if (!in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(Real))))
      throw std::runtime_error("truncated checkpoint");
    m.params.names.push_back(std::move(name));
    m.params.values.push_back(std::move(v));
  }
  if (!m.all_finite()) throw std::runtime_error("checkpoint contains non-finite parameters");
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_checkpoint(out, m);
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return read_checkpoint(in);
}

std::uint64_t checkpoint_hash(const ModelCheckpoint& m) {
  std::ostringstream buf(std::ios::binary);
  write_checkpoint(buf, m);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : buf.str()) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace backflush
