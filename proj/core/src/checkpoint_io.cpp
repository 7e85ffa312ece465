#include "xdial/checkpoint_io.hpp"

#include <bit>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace xdial {

namespace {

using nlohmann::json;

json shape_to_json(const Shape& s) { return json(s); }

Shape shape_from_json(const json& j) { return j.get<Shape>(); }

json records_to_json(const std::vector<TensorRecord>& records) {
  json arr = json::array();
  for (const auto& r : records)
    arr.push_back({{"name", r.name}, {"shape", shape_to_json(r.shape)}, {"offset", r.offset},
                   {"length", r.length}});
  return arr;
}

std::vector<TensorRecord> records_from_json(const json& arr) {
  std::vector<TensorRecord> records;
  for (const auto& j : arr) {
    TensorRecord r;
    r.name = j.at("name").get<std::string>();
    r.shape = shape_from_json(j.at("shape"));
    r.offset = j.at("offset").get<std::int64_t>();
    r.length = j.at("length").get<std::int64_t>();
    records.push_back(std::move(r));
  }
  return records;
}

void require_little_endian() {
  if constexpr (std::endian::native != std::endian::little)
    throw CheckpointError("checkpoint blobs are little-endian; host is not");
}

}  // namespace

void write_manifest(const std::string& path, const Manifest& m) {
  json j;
  j["format"] = m.format;
  j["dtype"] = m.dtype;
  j["model"] = {
      {"d", m.model.d},
      {"heads", m.model.heads},
      {"enc_layers", m.model.enc_layers},
      {"dec_layers_intention", m.model.dec_layers_intention},
      {"dec_layers_generation", m.model.dec_layers_generation},
      {"vocab_size", m.model.vocab_size},
      {"max_turns", m.model.max_turns},
      {"max_sentence_len", m.model.max_sentence_len},
      {"decoder_mode", to_string(m.model.decoder_mode)},
      {"dropout", m.model.dropout},
      {"turn_pos", m.model.turn_pos},
      {"token_pos", m.model.token_pos},
      {"tie_output", m.model.tie_output},
      {"gru_bias", m.model.gru_bias},
  };
  j["vocab_hash"] = m.meta.vocab_hash;
  j["progress"] = {{"step", m.meta.step},
                   {"epoch", m.meta.epoch},
                   {"step_in_epoch", m.meta.step_in_epoch}};
  if (m.meta.has_dev_nll) j["progress"]["dev_nll"] = m.meta.dev_nll;
  j["optimizer"] = {{"t", m.optim_t},
                    {"lr", m.optim_lr},
                    {"beta1", m.optim_beta1},
                    {"beta2", m.optim_beta2},
                    {"eps", m.optim_eps},
                    {"weight_decay", m.optim_weight_decay},
                    {"warmup_steps", m.optim_warmup_steps}};
  j["params"] = records_to_json(m.params);
  j["optim"] = records_to_json(m.optim);

  std::ofstream out(path);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path);
  out << j.dump(2) << "\n";
}

Manifest read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint: malformed manifest " + path + ": " + e.what());
  }
  try {
    Manifest m;
    m.format = j.at("format").get<int>();
    if (m.format != 1)
      throw CheckpointError("checkpoint: unsupported format version " + std::to_string(m.format));
    m.dtype = j.at("dtype").get<std::string>();
    const auto& jm = j.at("model");
    m.model.d = jm.at("d").get<std::int64_t>();
    m.model.heads = jm.at("heads").get<int>();
    m.model.enc_layers = jm.at("enc_layers").get<int>();
    m.model.dec_layers_intention = jm.at("dec_layers_intention").get<int>();
    m.model.dec_layers_generation = jm.at("dec_layers_generation").get<int>();
    m.model.vocab_size = jm.at("vocab_size").get<std::int64_t>();
    m.model.max_turns = jm.at("max_turns").get<int>();
    m.model.max_sentence_len = jm.at("max_sentence_len").get<std::int64_t>();
    m.model.decoder_mode = decoder_mode_from_string(jm.at("decoder_mode").get<std::string>());
    m.model.dropout = jm.at("dropout").get<double>();
    m.model.turn_pos = jm.at("turn_pos").get<bool>();
    m.model.token_pos = jm.at("token_pos").get<bool>();
    m.model.tie_output = jm.at("tie_output").get<bool>();
    m.model.gru_bias = jm.at("gru_bias").get<bool>();
    m.meta.vocab_hash = j.at("vocab_hash").get<std::string>();
    const auto& jp = j.at("progress");
    m.meta.step = jp.at("step").get<std::int64_t>();
    m.meta.epoch = jp.at("epoch").get<std::int64_t>();
    m.meta.step_in_epoch = jp.at("step_in_epoch").get<std::int64_t>();
    if (jp.contains("dev_nll")) {
      m.meta.dev_nll = jp.at("dev_nll").get<double>();
      m.meta.has_dev_nll = true;
    }
    const auto& jo = j.at("optimizer");
    m.optim_t = jo.at("t").get<std::int64_t>();
    m.optim_lr = jo.at("lr").get<double>();
    m.optim_beta1 = jo.at("beta1").get<double>();
    m.optim_beta2 = jo.at("beta2").get<double>();
    m.optim_eps = jo.at("eps").get<double>();
    m.optim_weight_decay = jo.at("weight_decay").get<double>();
    m.optim_warmup_steps = jo.at("warmup_steps").get<int>();
    m.params = records_from_json(j.at("params"));
    m.optim = records_from_json(j.at("optim"));
    return m;
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint: manifest " + path + " missing fields: " + e.what());
  }
}

std::string peek_checkpoint_dtype(const std::string& dir) {
  std::ifstream in(dir + "/manifest.json");
  if (!in) throw CheckpointError("checkpoint: cannot read " + dir + "/manifest.json");
  json j;
  try {
    in >> j;
    return j.at("dtype").get<std::string>();
  } catch (const json::exception& e) {
    throw CheckpointError("checkpoint: malformed manifest in " + dir + ": " + e.what());
  }
}

void write_blob(const std::string& path, const void* data, std::size_t bytes) {
  require_little_endian();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path);
  if (bytes > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw CheckpointError("checkpoint: short write to " + path);
}

std::vector<std::byte> read_blob(const std::string& path) {
  require_little_endian();
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw CheckpointError("checkpoint: cannot read " + path);
  const auto size = in.tellg();
  in.seekg(0);
  std::vector<std::byte> bytes(static_cast<std::size_t>(size));
  in.read(reinterpret_cast<char*>(bytes.data()), size);
  if (!in) throw CheckpointError("checkpoint: short read from " + path);
  return bytes;
}

void ensure_directory(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw DataError("cannot create directory " + dir + ": " + ec.message());
}

}  // namespace xdial
