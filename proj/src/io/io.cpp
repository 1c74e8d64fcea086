#include "tcprof/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "json.hpp"
#include "tcprof/errors.hpp"

namespace tcprof::io {
namespace {

using Kind = FormatError::Kind;
using json = nlohmann::json;

class Writer {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u16(std::uint16_t v) { le(v, 2); }
  void u32(std::uint32_t v) { le(v, 4); }
  void u64(std::uint64_t v) { le(v, 8); }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  void pad_to(std::size_t alignment) {
    while (bytes_.size() % alignment != 0) bytes_.push_back(0);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void le(std::uint64_t v, int n) {
    for (int i = 0; i < n; ++i) bytes_.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
  }
  std::vector<std::uint8_t> bytes_;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const char* what) : bytes_(bytes), what_(what) {}

  std::uint8_t u8() { return static_cast<std::uint8_t>(le(1)); }
  std::uint16_t u16() { return static_cast<std::uint16_t>(le(2)); }
  std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
  std::uint64_t u64() { return le(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void skip_to(std::size_t alignment) {
    const std::size_t target = (pos_ + alignment - 1) / alignment * alignment;
    need(target - pos_);
    pos_ = target;
  }
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(Kind::kTruncated, std::string(what_) + ": truncated at byte " +
                                              std::to_string(pos_) + " (need " +
                                              std::to_string(n) + " more)");
    }
  }
  const std::uint8_t* here() const { return bytes_.data() + pos_; }
  void advance(std::size_t n) {
    need(n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::uint64_t le(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  const std::vector<std::uint8_t>& bytes_;
  const char* what_;
  std::size_t pos_ = 0;
};

void check_magic(Reader& r, const char* magic, const char* what) {
  std::string got;
  try {
    got = r.str(4);
  } catch (const FormatError&) {
    throw FormatError(Kind::kTruncated, std::string(what) + ": file shorter than its magic");
  }
  if (got != magic) {
    throw FormatError(Kind::kBadMagic,
                      std::string(what) + ": bad magic (expected \"" + magic + "\")");
  }
}

bool is_code_dtype(DType d) { return d == DType::kUniformCodes || d == DType::kCodebookCodes; }

const char* norm_name(NormKind k) { return k == NormKind::kRms ? "rms" : "layer"; }
const char* pos_name(PosKind k) { return k == PosKind::kLearned ? "learned" : "rotary"; }
const char* mlp_name(MlpKind k) { return k == MlpKind::kGelu ? "gelu" : "swiglu"; }

json config_to_json(const ModelConfig& c) {
  return json{{"n_blocks", c.n_blocks},   {"d_model", c.d_model},   {"n_heads", c.n_heads},
              {"n_kv_heads", c.n_kv_heads}, {"d_ff", c.d_ff},       {"vocab", c.vocab},
              {"max_seq", c.max_seq},     {"norm", norm_name(c.norm)}, {"pos", pos_name(c.pos)},
              {"mlp", mlp_name(c.mlp)},   {"biases", c.biases},     {"norm_eps", c.norm_eps},
              {"rope_base", c.rope_base}, {"init_std", c.init_std}};
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("config.") + key + ": " + e.what());
  }
}

ModelConfig config_from_json(const json& j) {
  if (!j.is_object()) throw InvalidArgument("config: expected a JSON object");
  ModelConfig c;
  read_field(j, "n_blocks", c.n_blocks);
  read_field(j, "d_model", c.d_model);
  read_field(j, "n_heads", c.n_heads);
  read_field(j, "n_kv_heads", c.n_kv_heads);
  read_field(j, "d_ff", c.d_ff);
  read_field(j, "vocab", c.vocab);
  read_field(j, "max_seq", c.max_seq);
  read_field(j, "biases", c.biases);
  read_field(j, "norm_eps", c.norm_eps);
  read_field(j, "rope_base", c.rope_base);
  read_field(j, "init_std", c.init_std);
  std::string s;
  if (j.contains("norm")) {
    read_field(j, "norm", s);
    if (s == "rms") c.norm = NormKind::kRms;
    else if (s == "layer") c.norm = NormKind::kLayer;
    else throw InvalidArgument("config.norm: expected \"rms\" or \"layer\", got \"" + s + "\"");
  }
  if (j.contains("pos")) {
    read_field(j, "pos", s);
    if (s == "learned") c.pos = PosKind::kLearned;
    else if (s == "rotary") c.pos = PosKind::kRotary;
    else throw InvalidArgument("config.pos: expected \"learned\" or \"rotary\", got \"" + s + "\"");
  }
  if (j.contains("mlp")) {
    read_field(j, "mlp", s);
    if (s == "gelu") c.mlp = MlpKind::kGelu;
    else if (s == "swiglu") c.mlp = MlpKind::kSwiglu;
    else throw InvalidArgument("config.mlp: expected \"gelu\" or \"swiglu\", got \"" + s + "\"");
  }
  c.validate();
  return c;
}

std::filesystem::path resolve(const std::filesystem::path& base, const std::filesystem::path& p) {
  return p.is_absolute() ? p : base.parent_path() / p;
}

}  // namespace

std::uint64_t Tensor::element_count() const {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

const Tensor* TensorFile::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t;
  return nullptr;
}

const Tensor& TensorFile::at(const std::string& name) const {
  const Tensor* t = find(name);
  if (!t) throw FormatError(Kind::kMalformed, "TCPF: missing tensor \"" + name + "\"");
  return *t;
}

void TensorFile::add_matrix(const std::string& name, const Matrix& m, DType dtype) {
  tensors.push_back({name, dtype, {m.rows(), m.cols()}, m.storage(), {}});
}

void TensorFile::add_vector(const std::string& name, const std::vector<double>& v, DType dtype) {
  tensors.push_back({name, dtype, {v.size()}, v, {}});
}

std::vector<std::uint8_t> encode_tcpf(const TensorFile& file) {
  Writer w;
  w.raw("TCPF", 4);
  w.u32(kTcpfVersion);
  w.u32(static_cast<std::uint32_t>(file.tensors.size()));
  for (const auto& t : file.tensors) {
    if (t.name.size() > 0xFFFF) throw InvalidArgument("TCPF: tensor name too long");
    if (t.shape.size() > 0xFF) throw InvalidArgument("TCPF: rank too large");
    const std::uint64_t n = t.element_count();
    const bool codes = is_code_dtype(t.dtype);
    if ((codes ? t.codes.size() : t.values.size()) != n) {
      throw InvalidArgument("TCPF: tensor \"" + t.name + "\" data length does not match shape");
    }
    w.u16(static_cast<std::uint16_t>(t.name.size()));
    w.raw(t.name.data(), t.name.size());
    w.u8(static_cast<std::uint8_t>(t.dtype));
    w.u8(static_cast<std::uint8_t>(t.shape.size()));
    for (auto d : t.shape) w.u64(d);
    w.pad_to(kTcpfAlignment);
    switch (t.dtype) {
      case DType::kF32:
        for (double v : t.values) w.f32(static_cast<float>(v));
        break;
      case DType::kF64:
        for (double v : t.values) w.f64(v);
        break;
      case DType::kUniformCodes:
      case DType::kCodebookCodes:
        w.raw(t.codes.data(), t.codes.size());
        break;
      default:
        throw InvalidArgument("TCPF: unknown dtype");
    }
  }
  return w.take();
}

TensorFile decode_tcpf(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "TCPF");
  check_magic(r, "TCPF", "TCPF");
  const std::uint32_t version = r.u32();
  if (version != kTcpfVersion) {
    throw FormatError(Kind::kVersionMismatch, "TCPF: version " + std::to_string(version) +
                                                  " unsupported (expected " +
                                                  std::to_string(kTcpfVersion) + ")");
  }
  const std::uint32_t count = r.u32();
  TensorFile file;
  file.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    Tensor t;
    t.name = r.str(r.u16());
    const std::uint8_t dtype = r.u8();
    if (dtype != 0 && dtype != 1 && dtype != 16 && dtype != 17) {
      throw FormatError(Kind::kMalformed,
                        "TCPF: tensor \"" + t.name + "\" has unknown dtype " + std::to_string(dtype));
    }
    t.dtype = static_cast<DType>(dtype);
    const std::uint8_t rank = r.u8();
    for (std::uint8_t d = 0; d < rank; ++d) t.shape.push_back(r.u64());
    r.skip_to(kTcpfAlignment);
    const std::uint64_t n = t.element_count();
    switch (t.dtype) {
      case DType::kF32:
        r.need(n * 4);
        t.values.resize(n);
        for (auto& v : t.values) v = static_cast<double>(r.f32());
        break;
      case DType::kF64:
        r.need(n * 8);
        t.values.resize(n);
        for (auto& v : t.values) v = r.f64();
        break;
      default:
        r.need(n);
        t.codes.assign(r.here(), r.here() + n);
        r.advance(n);
        break;
    }
    file.tensors.push_back(std::move(t));
  }
  if (!r.at_end()) throw FormatError(Kind::kMalformed, "TCPF: trailing bytes after last tensor");
  return file;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InvalidArgument("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InvalidArgument("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void write_tcpf(const std::filesystem::path& path, const TensorFile& file) {
  write_file(path, encode_tcpf(file));
}

TensorFile read_tcpf(const std::filesystem::path& path) { return decode_tcpf(read_file(path)); }

Matrix tensor_to_matrix(const Tensor& t) {
  if (t.shape.size() != 2 || is_code_dtype(t.dtype)) {
    throw FormatError(Kind::kMalformed, "TCPF: tensor \"" + t.name + "\" is not a real matrix");
  }
  return Matrix(t.shape[0], t.shape[1], t.values);
}

std::vector<double> tensor_to_vector(const Tensor& t) {
  if (t.shape.size() != 1 || is_code_dtype(t.dtype)) {
    throw FormatError(Kind::kMalformed, "TCPF: tensor \"" + t.name + "\" is not a real vector");
  }
  return t.values;
}

void add_quantized(TensorFile& file, const std::string& name, const quant::QuantizedTensor& q) {
  const DType dtype =
      q.scheme.kind == quant::SchemeKind::kUniform ? DType::kUniformCodes : DType::kCodebookCodes;
  file.tensors.push_back({name, dtype, {q.rows, q.cols}, {}, q.codes});
  file.add_vector(name + ".qparams",
                  {static_cast<double>(q.scheme.kind), static_cast<double>(q.scheme.param),
                   static_cast<double>(q.scheme.group_size.value_or(0))});
  switch (q.scheme.kind) {
    case quant::SchemeKind::kUniform:
      file.add_vector(name + ".scale", q.scale);
      file.add_vector(name + ".zero", q.zero);
      break;
    case quant::SchemeKind::kKMeans:
      file.add_vector(name + ".codebook", q.codebook);
      break;
    case quant::SchemeKind::kNf4:
      file.add_vector(name + ".absmax", q.absmax);
      break;
  }
}

quant::QuantizedTensor read_quantized(const TensorFile& file, const std::string& name) {
  const Tensor& codes = file.at(name);
  if (!is_code_dtype(codes.dtype) || codes.shape.size() != 2) {
    throw FormatError(Kind::kMalformed, "TCPF: \"" + name + "\" is not a quantized matrix");
  }
  const auto params = tensor_to_vector(file.at(name + ".qparams"));
  if (params.size() != 3) throw FormatError(Kind::kMalformed, "TCPF: bad qparams for " + name);
  quant::QuantizedTensor q;
  q.scheme.kind = static_cast<quant::SchemeKind>(static_cast<int>(params[0]));
  q.scheme.param = static_cast<unsigned>(params[1]);
  if (params[2] > 0) q.scheme.group_size = static_cast<std::size_t>(params[2]);
  q.rows = codes.shape[0];
  q.cols = codes.shape[1];
  q.codes = codes.codes;
  switch (q.scheme.kind) {
    case quant::SchemeKind::kUniform:
      q.scale = tensor_to_vector(file.at(name + ".scale"));
      q.zero = tensor_to_vector(file.at(name + ".zero"));
      break;
    case quant::SchemeKind::kKMeans:
      q.codebook = tensor_to_vector(file.at(name + ".codebook"));
      break;
    case quant::SchemeKind::kNf4:
      q.absmax = tensor_to_vector(file.at(name + ".absmax"));
      break;
    default:
      throw FormatError(Kind::kMalformed, "TCPF: unknown quantizer kind for " + name);
  }
  return q;
}

TensorFile model_to_tensors(const ModelBundle& model, DType dtype) {
  if (model.surgery.has_runtime_actions()) {
    throw InvalidArgument("save_model: runtime surgery actions cannot be serialized (" +
                          model.surgery.describe() + ")");
  }
  TensorFile f;
  f.add_matrix("embedding", model.embedding, dtype);
  if (!model.pos_embedding.empty()) f.add_matrix("pos_embedding", model.pos_embedding, dtype);
  for (std::size_t i = 0; i < model.blocks.size(); ++i) {
    const auto& w = model.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    f.add_matrix(p + "attn_qkv", w.attn_qkv, dtype);
    f.add_matrix(p + "attn_out", w.attn_out, dtype);
    f.add_matrix(p + "mlp_in", w.mlp_in, dtype);
    if (!w.mlp_gate.empty()) f.add_matrix(p + "mlp_gate", w.mlp_gate, dtype);
    f.add_matrix(p + "mlp_out", w.mlp_out, dtype);
    f.add_vector(p + "norm1_gain", w.norm1_gain, dtype);
    f.add_vector(p + "norm2_gain", w.norm2_gain, dtype);
    const std::pair<const char*, const std::vector<double>*> biases[] = {
        {"norm1_bias", &w.norm1_bias},       {"norm2_bias", &w.norm2_bias},
        {"attn_qkv_bias", &w.attn_qkv_bias}, {"attn_out_bias", &w.attn_out_bias},
        {"mlp_in_bias", &w.mlp_in_bias},     {"mlp_gate_bias", &w.mlp_gate_bias},
        {"mlp_out_bias", &w.mlp_out_bias}};
    for (const auto& [name, v] : biases)
      if (!v->empty()) f.add_vector(p + name, *v, dtype);
  }
  f.add_vector("final_norm_gain", model.final_norm_gain, dtype);
  if (!model.final_norm_bias.empty()) f.add_vector("final_norm_bias", model.final_norm_bias, dtype);
  f.add_matrix("head", model.head, dtype);
  return f;
}

ModelBundle model_from_tensors(const TensorFile& f, const ModelConfig& config) {
  config.validate();
  ModelBundle m;
  m.config = config;
  auto opt_vec = [&](const std::string& name) {
    const Tensor* t = f.find(name);
    return t ? tensor_to_vector(*t) : std::vector<double>{};
  };
  m.embedding = tensor_to_matrix(f.at("embedding"));
  if (config.pos == PosKind::kLearned) m.pos_embedding = tensor_to_matrix(f.at("pos_embedding"));
  m.blocks.resize(config.n_blocks);
  for (std::size_t i = 0; i < config.n_blocks; ++i) {
    auto& w = m.blocks[i];
    const std::string p = "blocks." + std::to_string(i) + ".";
    w.attn_qkv = tensor_to_matrix(f.at(p + "attn_qkv"));
    w.attn_out = tensor_to_matrix(f.at(p + "attn_out"));
    w.mlp_in = tensor_to_matrix(f.at(p + "mlp_in"));
    if (config.mlp == MlpKind::kSwiglu) w.mlp_gate = tensor_to_matrix(f.at(p + "mlp_gate"));
    w.mlp_out = tensor_to_matrix(f.at(p + "mlp_out"));
    w.norm1_gain = tensor_to_vector(f.at(p + "norm1_gain"));
    w.norm2_gain = tensor_to_vector(f.at(p + "norm2_gain"));
    w.norm1_bias = opt_vec(p + "norm1_bias");
    w.norm2_bias = opt_vec(p + "norm2_bias");
    w.attn_qkv_bias = opt_vec(p + "attn_qkv_bias");
    w.attn_out_bias = opt_vec(p + "attn_out_bias");
    w.mlp_in_bias = opt_vec(p + "mlp_in_bias");
    w.mlp_gate_bias = opt_vec(p + "mlp_gate_bias");
    w.mlp_out_bias = opt_vec(p + "mlp_out_bias");
  }
  m.final_norm_gain = tensor_to_vector(f.at("final_norm_gain"));
  m.final_norm_bias = opt_vec("final_norm_bias");
  m.head = tensor_to_matrix(f.at("head"));
  m.validate();
  return m;
}

std::vector<std::uint8_t> encode_toks(const TokenStream& s) {
  Writer w;
  w.raw("TOKS", 4);
  w.u32(kToksVersion);
  w.u32(s.vocab);
  w.u64(s.ids.size());
  for (auto id : s.ids) {
    if (id >= s.vocab) throw InvalidArgument("TOKS: token id " + std::to_string(id) + " >= vocab");
    w.u32(id);
  }
  return w.take();
}

TokenStream decode_toks(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes, "TOKS");
  check_magic(r, "TOKS", "TOKS");
  const std::uint32_t version = r.u32();
  if (version != kToksVersion) {
    throw FormatError(Kind::kVersionMismatch,
                      "TOKS: version " + std::to_string(version) + " unsupported");
  }
  TokenStream s;
  s.vocab = r.u32();
  const std::uint64_t n = r.u64();
  r.need(n * 4);
  s.ids.resize(n);
  for (auto& id : s.ids) {
    id = r.u32();
    if (id >= s.vocab) {
      throw FormatError(Kind::kMalformed, "TOKS: token id " + std::to_string(id) + " >= vocab " +
                                              std::to_string(s.vocab));
    }
  }
  if (!r.at_end()) throw FormatError(Kind::kMalformed, "TOKS: trailing bytes");
  return s;
}

void write_toks(const std::filesystem::path& path, const TokenStream& s) {
  write_file(path, encode_toks(s));
}

TokenStream read_toks(const std::filesystem::path& path) { return decode_toks(read_file(path)); }

TokenDataset make_dataset(const TokenStream& stream, const SplitSpec& spec) {
  if (spec.seq_len < 2) throw InvalidArgument("splits.seq_len must be >= 2");
  const auto overlaps = [](std::size_t a, std::size_t an, std::size_t b, std::size_t bn) {
    return a < b + bn && b < a + an;
  };
  if (spec.calibration_count > 0 && spec.eval_count > 0 &&
      overlaps(spec.calibration_offset, spec.calibration_count, spec.eval_offset, spec.eval_count)) {
    throw InvalidArgument("splits: calibration and eval ranges overlap");
  }
  auto cut = [&](std::size_t offset, std::size_t count, const char* name) {
    std::vector<std::vector<std::uint32_t>> out;
    const std::size_t end = (offset + count) * spec.seq_len;
    if (end > stream.ids.size()) {
      throw InvalidArgument(std::string("splits.") + name + " extends past the token stream (" +
                            std::to_string(end) + " > " + std::to_string(stream.ids.size()) + ")");
    }
    for (std::size_t i = 0; i < count; ++i) {
      const auto begin = stream.ids.begin() + static_cast<std::ptrdiff_t>((offset + i) * spec.seq_len);
      out.emplace_back(begin, begin + static_cast<std::ptrdiff_t>(spec.seq_len));
    }
    return out;
  };
  TokenDataset d;
  d.vocab = stream.vocab;
  d.calibration = cut(spec.calibration_offset, spec.calibration_count, "calibration");
  d.eval = cut(spec.eval_offset, spec.eval_count, "eval");
  d.validate();
  return d;
}

std::pair<TokenStream, SplitSpec> flatten_dataset(const TokenDataset& data) {
  SplitSpec spec;
  spec.seq_len = data.calibration.empty() ? (data.eval.empty() ? 0 : data.eval[0].size())
                                          : data.calibration[0].size();
  TokenStream s;
  s.vocab = static_cast<std::uint32_t>(data.vocab);
  for (Split split : {Split::kCalibration, Split::kEval}) {
    for (const auto& seq : data.split(split)) {
      if (seq.size() != spec.seq_len) {
        throw InvalidArgument("flatten_dataset: sequences must share one length");
      }
      s.ids.insert(s.ids.end(), seq.begin(), seq.end());
    }
  }
  spec.calibration_offset = 0;
  spec.calibration_count = data.calibration.size();
  spec.eval_offset = data.calibration.size();
  spec.eval_count = data.eval.size();
  return {std::move(s), spec};
}

std::string config_to_json_string(const ModelConfig& c) { return config_to_json(c).dump(); }

ModelConfig config_from_json_string(const std::string& s) {
  try {
    return config_from_json(json::parse(s));
  } catch (const json::parse_error& e) {
    throw InvalidArgument(std::string("config: ") + e.what());
  }
}

Manifest read_manifest(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw InvalidArgument("manifest " + path.string() + ": " + e.what());
  }
  Manifest m;
  if (!j.contains("model")) throw InvalidArgument("manifest: missing \"model\" object");
  m.config = config_from_json(j.at("model"));
  if (j.contains("weights")) m.weights = resolve(path, j.at("weights").get<std::string>());
  if (j.contains("tokens")) m.tokens = resolve(path, j.at("tokens").get<std::string>());
  if (j.contains("splits")) {
    const json& s = j.at("splits");
    SplitSpec spec;
    try {
      spec.seq_len = s.at("seq_len").get<std::size_t>();
      spec.calibration_offset = s.at("calibration").at("offset").get<std::size_t>();
      spec.calibration_count = s.at("calibration").at("count").get<std::size_t>();
      spec.eval_offset = s.at("eval").at("offset").get<std::size_t>();
      spec.eval_count = s.at("eval").at("count").get<std::size_t>();
    } catch (const json::exception& e) {
      throw InvalidArgument(std::string("manifest.splits: ") + e.what());
    }
    m.splits = spec;
  }
  if (j.contains("fingerprint")) {
    Fingerprint fp;
    fp.probe_tokens = j.at("fingerprint").at("probe_tokens").get<std::vector<std::uint32_t>>();
    fp.logits = j.at("fingerprint").at("logits").get<std::vector<double>>();
    m.fingerprint = fp;
  }
  return m;
}

void write_manifest(const std::filesystem::path& path, const Manifest& m) {
  json j;
  j["format"] = "tcprof-manifest";
  j["version"] = 1;
  j["model"] = config_to_json(m.config);
  if (!m.weights.empty()) j["weights"] = m.weights.string();
  if (!m.tokens.empty()) j["tokens"] = m.tokens.string();
  if (m.splits) {
    const auto& s = *m.splits;
    j["splits"] = {{"seq_len", s.seq_len},
                   {"calibration", {{"offset", s.calibration_offset}, {"count", s.calibration_count}}},
                   {"eval", {{"offset", s.eval_offset}, {"count", s.eval_count}}}};
  }
  if (m.fingerprint) {
    j["fingerprint"] = {{"probe_tokens", m.fingerprint->probe_tokens},
                        {"logits", m.fingerprint->logits}};
  }
  const std::string text = j.dump(2) + "\n";
  write_file(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

void save_model(const ModelBundle& model, const std::filesystem::path& manifest_path) {
  std::filesystem::path weights = manifest_path;
  weights.replace_extension(".tcpf");
  write_tcpf(weights, model_to_tensors(model));
  Manifest m;
  std::filesystem::path manifest = manifest_path;
  manifest.replace_extension(".json");
  if (std::filesystem::exists(manifest)) {
    try {
      m = read_manifest(manifest);
    } catch (const Error&) {
      m = Manifest{};
    }
  }
  m.config = model.config;
  m.weights = weights.filename();
  write_manifest(manifest, m);
}

ModelBundle load_model(const std::filesystem::path& path) {
  std::filesystem::path manifest = path;
  if (path.extension() == ".tcpf") manifest.replace_extension(".json");
  const Manifest m = read_manifest(manifest);
  std::filesystem::path weights = m.weights;
  if (weights.empty()) {
    weights = manifest;
    weights.replace_extension(".tcpf");
  }
  return model_from_tensors(read_tcpf(weights), m.config);
}

TokenDataset load_dataset(const std::filesystem::path& manifest_path) {
  const Manifest m = read_manifest(manifest_path);
  if (m.tokens.empty()) throw InvalidArgument("manifest: no \"tokens\" file");
  if (!m.splits) throw InvalidArgument("manifest: no \"splits\" object");
  TokenDataset d = make_dataset(read_toks(m.tokens), *m.splits);
  if (d.vocab != m.config.vocab) {
    throw InvalidArgument("manifest: token vocab " + std::to_string(d.vocab) +
                          " != model vocab " + std::to_string(m.config.vocab));
  }
  return d;
}

TensorFile exit_heads_to_tensors(const std::vector<exit::ExitHead>& heads) {
  TensorFile f;
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const auto& h = heads[i];
    const std::string p = "exit." + std::to_string(i) + ".";
    f.add_matrix(p + "weight", h.weight);
    f.add_vector(p + "norm_gain", h.norm_gain);
    if (!h.norm_bias.empty()) f.add_vector(p + "norm_bias", h.norm_bias);
    f.add_vector(p + "meta", {static_cast<double>(h.attach_block), static_cast<double>(h.trained_steps)});
  }
  return f;
}

std::vector<exit::ExitHead> exit_heads_from_tensors(const TensorFile& file) {
  std::vector<exit::ExitHead> heads;
  for (std::size_t i = 0;; ++i) {
    const std::string p = "exit." + std::to_string(i) + ".";
    if (!file.find(p + "meta")) break;
    const auto meta = tensor_to_vector(file.at(p + "meta"));
    if (meta.size() != 2 || meta[0] < 0 || meta[1] < 0) {
      throw FormatError(FormatError::Kind::kMalformed, "exit heads: bad " + p + "meta");
    }
    exit::ExitHead h;
    h.attach_block = static_cast<std::size_t>(meta[0]);
    h.trained_steps = static_cast<std::size_t>(meta[1]);
    h.weight = tensor_to_matrix(file.at(p + "weight"));
    h.norm_gain = tensor_to_vector(file.at(p + "norm_gain"));
    if (const Tensor* b = file.find(p + "norm_bias")) h.norm_bias = tensor_to_vector(*b);
    if (h.norm_gain.size() != h.weight.cols()) {
      throw FormatError(FormatError::Kind::kMalformed, "exit heads: " + p + "norm_gain does not match weight");
    }
    heads.push_back(std::move(h));
  }
  if (heads.empty()) throw FormatError(FormatError::Kind::kMalformed, "exit heads: no heads in file");
  return heads;
}

}  // namespace tcprof::io
