#include "diffuseq/checkpoint.hpp"

#include "diffuseq/tokenizer.hpp"

#include <nlohmann/json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace diffuseq {

namespace {

using nlohmann::json;

constexpr char kMagic[4] = {'D', 'S', 'Q', '1'};
static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

class Writer {
 public:
  void bytes(const void* p, std::size_t n) { buf_.append(static_cast<const char*>(p), n); }
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  const std::string& data() const { return buf_; }

 private:
  std::string buf_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  void need(std::size_t n) const {
    if (pos_ + n > data_.size()) throw FormatError("checkpoint: truncated file");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string_view raw(std::size_t n) {
    need(n);
    auto v = data_.substr(pos_, n);
    pos_ += n;
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

std::uint64_t fnv1a(std::string_view data) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : data) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

json model_config_json(const ModelConfig& m) {
  return {{"vocab_size", m.vocab_size}, {"d_emb", m.d_emb},     {"d_model", m.d_model},
          {"n_layers", m.n_layers},     {"n_heads", m.n_heads}, {"d_ff", m.d_ff},
          {"max_len", m.max_len},       {"dropout", m.dropout}};
}

ModelConfig model_config_from(const json& j) {
  ModelConfig m;
  m.vocab_size = j.at("vocab_size");
  m.d_emb = j.at("d_emb");
  m.d_model = j.at("d_model");
  m.n_layers = j.at("n_layers");
  m.n_heads = j.at("n_heads");
  m.d_ff = j.at("d_ff");
  m.max_len = j.at("max_len");
  m.dropout = j.at("dropout");
  return m;
}

void put_tensor(Writer& w, const std::string& name, const MatrixF& m) {
  w.str(name);
  w.u32(2);
  w.u32(static_cast<std::uint32_t>(m.rows()));
  w.u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.size(); ++i) w.f32(m.data()[i]);
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainConfig& config, const TrainState& state,
                     const std::string& vocab_text, std::uint64_t vocab_hash, bool include_optimizer) {
  const auto& model = state.model;
  json meta;
  meta["model"] = model_config_json(model.config);
  meta["schedule"] = {{"T", model.schedule.T},
                      {"s", model.schedule.s},
                      {"floor", model.schedule.floor},
                      {"beta_cap", model.schedule.beta_cap}};
  meta["train_config"] = config.serialize();
  meta["vocab_hash"] = vocab_hash;
  meta["vocab"] = vocab_text;
  meta["step"] = state.step;
  meta["frozen_source"] = model.frozen_src.has_value();
  meta["has_optimizer"] = include_optimizer;
  if (include_optimizer) {
    meta["adam_step"] = state.adam.step;
    json hist = json::array();
    for (const auto& h : state.importance.history()) hist.push_back(std::vector<double>(h.begin(), h.end()));
    meta["importance"] = {{"history", hist}, {"counts", state.importance.counts()}};
  }

  std::vector<std::pair<std::string, const MatrixF*>> tensors;
  model.params.visit([&](const std::string& name, const MatrixF& m) { tensors.emplace_back(name, &m); });
  if (model.frozen_src) tensors.emplace_back("emb_src_frozen.weight", &*model.frozen_src);
  if (include_optimizer) {
    state.adam.m.visit([&](const std::string& name, const MatrixF& m) { tensors.emplace_back("adam.m." + name, &m); });
    state.adam.v.visit([&](const std::string& name, const MatrixF& m) { tensors.emplace_back("adam.v." + name, &m); });
  }

  Writer w;
  w.bytes(kMagic, 4);
  w.u32(kCheckpointVersion);
  w.str(meta.dump());
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) put_tensor(w, name, *m);
  w.u64(fnv1a(w.data()));

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write checkpoint " + path);
  f.write(w.data().data(), static_cast<std::streamsize>(w.data().size()));
  if (!f) throw IoError("failed writing checkpoint " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open checkpoint " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();
  if (data.size() < 4 + 4 + 8 || std::memcmp(data.data(), kMagic, 4) != 0) {
    throw FormatError("checkpoint: bad magic in " + path);
  }
  const std::string_view body(data.data(), data.size() - 8);
  Reader tail(std::string_view(data).substr(data.size() - 8));
  if (tail.u64() != fnv1a(body)) throw FormatError("checkpoint: checksum mismatch in " + path);

  Reader r(body);
  r.raw(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) throw FormatError("checkpoint: unsupported version " + std::to_string(version));

  json meta;
  try {
    meta = json::parse(r.str());
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: malformed meta block: ") + e.what());
  }

  std::map<std::string, MatrixF> tensors;
  const std::uint32_t n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::string name = r.str();
    const std::uint32_t ndim = r.u32();
    if (ndim != 2) throw FormatError("checkpoint: tensor '" + name + "' has unsupported rank");
    const std::uint32_t rows = r.u32(), cols = r.u32();
    r.need(static_cast<std::size_t>(rows) * cols * 4);
    MatrixF m(rows, cols);
    for (Eigen::Index k = 0; k < m.size(); ++k) m.data()[k] = r.f32();
    tensors.emplace(name, std::move(m));
  }
  if (r.pos() != body.size()) throw FormatError("checkpoint: trailing bytes");

  Checkpoint ck;
  try {
    ck.vocab_text = meta.at("vocab").get<std::string>();
    ck.vocab_hash = meta.at("vocab_hash").get<std::uint64_t>();
    ck.config = parse_train_config(meta.at("train_config").get<std::string>());
    ck.state.model.config = model_config_from(meta.at("model"));
    const auto& sj = meta.at("schedule");
    ck.state.model.schedule = build_sqrt_schedule(sj.at("T"), sj.at("s"), sj.at("floor"), sj.at("beta_cap"));
    ck.state.step = meta.at("step");
    ck.has_optimizer = meta.at("has_optimizer");
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad meta field: ") + e.what());
  }
  if (!ck.vocab_text.empty() && Vocab::parse(ck.vocab_text).hash() != ck.vocab_hash) {
    throw FormatError("checkpoint: vocab hash mismatch");
  }
  if (ck.config.T != ck.state.model.schedule.T || ck.config.s != ck.state.model.schedule.s) {
    throw FormatError("checkpoint: schedule parameters disagree with the training config");
  }
  ck.state.model.config.validate();

  auto take = [&](const std::string& name, MatrixF& dst, Eigen::Index rows, Eigen::Index cols) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw FormatError("checkpoint: missing tensor '" + name + "'");
    if (rows >= 0 && (it->second.rows() != rows || it->second.cols() != cols)) {
      throw FormatError("checkpoint: tensor '" + name + "' has wrong shape");
    }
    dst = std::move(it->second);
  };

  // Shapes come from a freshly initialized reference model.
  const ModelParams<float> ref = init_params<float>(ck.state.model.config, 0);
  ck.state.model.params = ref;
  std::vector<std::pair<std::string, MatrixF*>> slots;
  ck.state.model.params.visit([&](const std::string& name, MatrixF& m) { slots.emplace_back(name, &m); });
  for (auto& [name, m] : slots) take(name, *m, m->rows(), m->cols());

  if (meta.value("frozen_source", false)) {
    MatrixF frozen;
    take("emb_src_frozen.weight", frozen, ref.emb.rows(), ref.emb.cols());
    ck.state.model.frozen_src = std::move(frozen);
  }

  ck.state.adam = AdamState<float>::like(ck.state.model.params);
  ck.state.importance = ImportanceState(ck.state.model.schedule.T);
  if (ck.has_optimizer) {
    ck.state.adam.step = meta.at("adam_step");
    std::vector<std::pair<std::string, MatrixF*>> mslots, vslots;
    ck.state.adam.m.visit([&](const std::string& name, MatrixF& m) { mslots.emplace_back(name, &m); });
    ck.state.adam.v.visit([&](const std::string& name, MatrixF& m) { vslots.emplace_back(name, &m); });
    for (auto& [name, m] : mslots) take("adam.m." + name, *m, m->rows(), m->cols());
    for (auto& [name, m] : vslots) take("adam.v." + name, *m, m->rows(), m->cols());
    try {
      const auto& imp = meta.at("importance");
      std::vector<std::array<double, ImportanceState::kHistory>> hist;
      for (const auto& row : imp.at("history")) {
        const auto v = row.get<std::vector<double>>();
        if (v.size() != ImportanceState::kHistory) throw FormatError("checkpoint: bad importance history row");
        std::array<double, ImportanceState::kHistory> a{};
        std::copy(v.begin(), v.end(), a.begin());
        hist.push_back(a);
      }
      ck.state.importance.restore(std::move(hist), imp.at("counts").get<std::vector<long>>());
    } catch (const json::exception& e) {
      throw FormatError(std::string("checkpoint: bad importance state: ") + e.what());
    }
    if (ck.state.importance.T() != ck.state.model.schedule.T) {
      throw FormatError("checkpoint: importance state does not match the schedule");
    }
  }
  return ck;
}

}  // namespace diffuseq
