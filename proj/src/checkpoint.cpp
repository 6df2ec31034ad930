#include "rticket/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "rticket/errors.hpp"

namespace rticket {

namespace io {

namespace {

template <class T>
void write_le(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  std::array<char, sizeof(T)> buf{};
  using U = std::make_unsigned_t<T>;
  auto u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    buf[i] = static_cast<char>((u >> (8 * i)) & 0xFFU);
  }
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

template <class T>
T read_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> buf{};
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!in) {
    throw FormatError("unexpected end of file");
  }
  using U = std::make_unsigned_t<T>;
  U u = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    u |= static_cast<U>(static_cast<U>(buf[i]) << (8 * i));
  }
  return static_cast<T>(u);
}

}  // namespace

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_i32(std::ostream& out, std::int32_t v) { write_le(out, v); }
void write_f32(std::ostream& out, float v) { write_le(out, std::bit_cast<std::uint32_t>(v)); }
void write_string(std::ostream& out, const std::string& s) {
  write_u32(out, static_cast<std::uint32_t>(s.size()));
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }
std::int32_t read_i32(std::istream& in) { return read_le<std::int32_t>(in); }
float read_f32(std::istream& in) { return std::bit_cast<float>(read_le<std::uint32_t>(in)); }
std::string read_string(std::istream& in, std::uint32_t max_len) {
  const auto n = read_u32(in);
  if (n > max_len) {
    throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  }
  std::string s(n, '\0');
  in.read(s.data(), n);
  if (!in) {
    throw FormatError("unexpected end of file");
  }
  return s;
}

}  // namespace io

namespace {

constexpr char kMagic[8] = {'R', 'T', 'C', 'K', 'P', 'T', '\0', '\0'};

struct NamedTensor {
  std::string name;
  std::vector<std::uint64_t> dims;
  std::vector<double> values;
};

struct Section {
  std::string name;
  std::vector<NamedTensor> tensors;
};

void write_tensor(std::ostream& out, const std::string& name, const std::vector<std::uint64_t>& dims,
                  std::span<const double> values) {
  io::write_string(out, name);
  io::write_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (auto d : dims) {
    io::write_u64(out, d);
  }
  for (double v : values) {
    io::write_f32(out, static_cast<float>(v));
  }
}

Section parameter_section(const std::string& name, const ParamLayout& layout, std::span<const double> values) {
  Section s{name, {}};
  for (const auto& slot : layout.slots()) {
    NamedTensor t;
    t.name = slot.name;
    t.dims = slot.rows == 1 ? std::vector<std::uint64_t>{static_cast<std::uint64_t>(slot.cols)}
                            : std::vector<std::uint64_t>{static_cast<std::uint64_t>(slot.rows),
                                                         static_cast<std::uint64_t>(slot.cols)};
    t.values.assign(values.begin() + static_cast<std::ptrdiff_t>(slot.offset),
                    values.begin() + static_cast<std::ptrdiff_t>(slot.offset + slot.size()));
    s.tensors.push_back(std::move(t));
  }
  return s;
}

std::vector<double> unpack_parameters(const Section& s, const ParamLayout& layout) {
  std::vector<double> theta(layout.total());
  if (s.tensors.size() != layout.slots().size()) {
    throw FormatError("section '" + s.name + "' has " + std::to_string(s.tensors.size()) +
                      " tensors, layout expects " + std::to_string(layout.slots().size()));
  }
  for (std::size_t i = 0; i < s.tensors.size(); ++i) {
    const auto& t = s.tensors[i];
    const auto& slot = layout.slots()[i];
    if (t.name != slot.name || t.values.size() != slot.size()) {
      throw FormatError("tensor '" + t.name + "' does not match layout entry '" + slot.name + "'");
    }
    std::copy(t.values.begin(), t.values.end(), theta.begin() + static_cast<std::ptrdiff_t>(slot.offset));
  }
  return theta;
}

}  // namespace

void write_checkpoint(const MaskedModel& model, std::ostream& out) {
  const auto& cfg = model.config();
  out.write(kMagic, sizeof(kMagic));
  io::write_u32(out, kCheckpointVersion);
  for (int v : {cfg.vocab_size, cfg.embed_dim, cfg.num_layers, cfg.num_heads, cfg.mlp_dim, cfg.max_seq_len,
                cfg.num_classes}) {
    io::write_i32(out, v);
  }
  std::vector<Section> sections;
  sections.push_back(parameter_section("theta", model.layout(), model.theta()));
  if (model.has_pretrained()) {
    sections.push_back(parameter_section("theta0", model.layout(), model.theta0()));
  }
  if (model.gates()) {
    const auto& g = *model.gates();
    Section s{"gates", {}};
    s.tensors.push_back({"log_alpha", {g.size()}, {g.log_alpha().begin(), g.log_alpha().end()}});
    s.tensors.push_back({"beta", {g.size()}, {g.beta().begin(), g.beta().end()}});
    s.tensors.push_back({"stretch", {2}, {g.gamma(), g.zeta()}});
    sections.push_back(std::move(s));
  }
  io::write_u32(out, static_cast<std::uint32_t>(sections.size()));
  for (const auto& s : sections) {
    io::write_string(out, s.name);
    io::write_u32(out, static_cast<std::uint32_t>(s.tensors.size()));
    for (const auto& t : s.tensors) {
      write_tensor(out, t.name, t.dims, t.values);
    }
  }
  if (!out) {
    throw FormatError("failed to write checkpoint");
  }
}

MaskedModel read_checkpoint(std::istream& in) {
  char magic[8] = {};
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const auto version = io::read_u32(in);
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ModelConfig cfg;
  cfg.vocab_size = io::read_i32(in);
  cfg.embed_dim = io::read_i32(in);
  cfg.num_layers = io::read_i32(in);
  cfg.num_heads = io::read_i32(in);
  cfg.mlp_dim = io::read_i32(in);
  cfg.max_seq_len = io::read_i32(in);
  cfg.num_classes = io::read_i32(in);
  try {
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint header: ") + e.what());
  }
  const ParamLayout layout(cfg);

  const auto section_count = io::read_u32(in);
  std::vector<Section> sections;
  for (std::uint32_t i = 0; i < section_count; ++i) {
    Section s;
    s.name = io::read_string(in);
    const auto tensor_count = io::read_u32(in);
    for (std::uint32_t j = 0; j < tensor_count; ++j) {
      NamedTensor t;
      t.name = io::read_string(in);
      const auto rank = io::read_u32(in);
      if (rank > 4) {
        throw FormatError("tensor '" + t.name + "' has unsupported rank " + std::to_string(rank));
      }
      std::uint64_t count = 1;
      for (std::uint32_t r = 0; r < rank; ++r) {
        t.dims.push_back(io::read_u64(in));
        count *= t.dims.back();
      }
      if (count > layout.total() + layout.maskable_count()) {
        throw FormatError("tensor '" + t.name + "' is larger than the model");
      }
      t.values.resize(count);
      for (auto& v : t.values) {
        v = static_cast<double>(io::read_f32(in));
      }
      s.tensors.push_back(std::move(t));
    }
    sections.push_back(std::move(s));
  }

  std::vector<double> theta;
  std::optional<std::vector<double>> theta0;
  std::optional<GateParams> gates;
  for (const auto& s : sections) {
    if (s.name == "theta") {
      theta = unpack_parameters(s, layout);
    } else if (s.name == "theta0") {
      theta0 = unpack_parameters(s, layout);
    } else if (s.name == "gates") {
      if (s.tensors.size() != 3 || s.tensors[0].name != "log_alpha" || s.tensors[1].name != "beta" ||
          s.tensors[2].values.size() != 2) {
        throw FormatError("malformed gates section");
      }
      gates = GateParams(s.tensors[0].values, s.tensors[1].values, s.tensors[2].values[0], s.tensors[2].values[1]);
    } else {
      throw FormatError("unknown checkpoint section '" + s.name + "'");
    }
  }
  if (theta.empty()) {
    throw FormatError("checkpoint has no theta section");
  }
  return MaskedModel(cfg, std::move(theta), std::move(theta0), std::move(gates));
}

void save_checkpoint(const MaskedModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw FormatError("cannot open '" + path.string() + "' for writing");
  }
  write_checkpoint(model, out);
}

MaskedModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw FormatError("cannot open checkpoint '" + path.string() + "'");
  }
  return read_checkpoint(in);
}

void round_to_storage(MaskedModel& model) {
  auto round = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (auto& v : model.theta()) {
    v = round(v);
  }
  std::optional<std::vector<double>> theta0;
  if (model.has_pretrained()) {
    theta0.emplace(model.theta0().begin(), model.theta0().end());
    for (auto& v : *theta0) {
      v = round(v);
    }
  }
  std::optional<GateParams> gates;
  if (model.gates()) {
    const auto& g = *model.gates();
    std::vector<double> la(g.log_alpha().begin(), g.log_alpha().end());
    std::vector<double> beta(g.beta().begin(), g.beta().end());
    for (auto& v : la) v = round(v);
    for (auto& v : beta) v = round(v);
    gates = GateParams(std::move(la), std::move(beta), round(g.gamma()), round(g.zeta()));
  }
  std::vector<double> theta(model.theta().begin(), model.theta().end());
  model = MaskedModel(model.config(), std::move(theta), std::move(theta0), std::move(gates));
}

}  // namespace rticket
