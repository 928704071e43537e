#pragma once

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "pi2i/common.hpp"
#include "pi2i/model.hpp"

namespace pi2i {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian doubles");

// Checkpoint layout: a text header (`#pi2i-ckpt v1`, config and dimension
// key=value lines, one `tensor <name> <rows> <cols>` line per tensor in
// enumeration order, `#data`), then the tensor payloads as raw 64-bit
// little-endian floats in the same order.
inline void save_params(const Model& model, std::uint64_t vocab_hash, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint: " + path);
  const TrainConfig& c = model.cfg;
  out << "#pi2i-ckpt v1\n";
  char hex[32];
  std::snprintf(hex, sizeof(hex), "%016llx", static_cast<unsigned long long>(vocab_hash));
  out << "vocab_hash=" << hex << '\n';
  out << "n_items=" << model.dims.n_items << '\n';
  out << "n_users=" << model.dims.n_users << '\n';
  out << "learning_rate=" << format_double(c.learning_rate) << '\n';
  out << "batch_size=" << c.batch_size << '\n';
  out << "embedding_dim=" << c.embedding_dim << '\n';
  out << "heads=" << c.heads << '\n';
  out << "key_dim=" << c.key_dim << '\n';
  out << "max_seq_len=" << c.max_seq_len << '\n';
  out << "epochs=" << c.epochs << '\n';
  out << "seed=" << c.seed << '\n';
  out << "attention_mode=" << to_string(c.attention_mode) << '\n';
  out << "trigger_mode=" << to_string(c.trigger_mode) << '\n';
  out << "literal_eq9=" << (c.literal_eq9 ? 1 : 0) << '\n';
  out << "query_hidden=" << c.query_hidden << '\n';
  out << "out_hidden1=" << c.out_hidden1 << '\n';
  out << "out_hidden2=" << c.out_hidden2 << '\n';
  {
    std::string fields;
    for (std::size_t i = 0; i < c.side_fields.size(); ++i) {
      if (i) fields += ',';
      fields += c.side_fields[i];
    }
    out << "side_fields=" << fields << '\n';
    std::string sizes;
    for (std::size_t i = 0; i < model.dims.side_vocab_sizes.size(); ++i) {
      if (i) sizes += ',';
      sizes += std::to_string(model.dims.side_vocab_sizes[i]);
    }
    out << "side_vocab_sizes=" << sizes << '\n';
  }
  out << "adam_beta1=" << format_double(c.adam_beta1) << '\n';
  out << "adam_beta2=" << format_double(c.adam_beta2) << '\n';
  out << "adam_eps=" << format_double(c.adam_eps) << '\n';
  model.params.for_each_tensor([&](const std::string& name, const Tensor& t) {
    out << "tensor " << name << ' ' << t.rows << ' ' << t.cols << '\n';
  });
  out << "#data\n";
  model.params.for_each_tensor([&](const std::string&, const Tensor& t) {
    out.write(reinterpret_cast<const char*>(t.a.data()),
              static_cast<std::streamsize>(t.a.size() * sizeof(double)));
  });
  if (!out) throw IoError("write failed: " + path);
}

struct Checkpoint {
  Model model;
  std::uint64_t vocab_hash = 0;
};

// expected_vocab_hash = 0 skips the vocabulary check (inspection tools only);
// pipeline callers always pass the hash of the mapping they run under.
inline Checkpoint load_params(const std::string& path, std::uint64_t expected_vocab_hash) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "#pi2i-ckpt v1")
    throw IoError(path + ": not a pi2i v1 checkpoint");

  Checkpoint ckpt;
  TrainConfig cfg;
  std::int64_t n_items = -1, n_users = -1;
  std::vector<std::int64_t> side_vocab_sizes;
  std::vector<std::pair<std::string, std::pair<std::int64_t, std::int64_t>>> tensor_decls;

  auto fail = [&](const std::string& why) -> void { throw IoError(path + ": " + why); };
  while (std::getline(in, line)) {
    if (line == "#data") break;
    if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ss(line.substr(7));
      std::string name;
      std::int64_t r = 0, cnum = 0;
      if (!(ss >> name >> r >> cnum)) fail("malformed tensor line: " + line);
      tensor_decls.push_back({name, {r, cnum}});
      continue;
    }
    auto eq = line.find('=');
    if (eq == std::string::npos) fail("malformed header line: " + line);
    const std::string key = line.substr(0, eq);
    const std::string val = line.substr(eq + 1);
    std::int64_t ival = 0;
    double fval = 0.0;
    if (key == "vocab_hash") {
      ckpt.vocab_hash = std::strtoull(val.c_str(), nullptr, 16);
    } else if (key == "n_items" && parse_i64(val, ival)) {
      n_items = ival;
    } else if (key == "n_users" && parse_i64(val, ival)) {
      n_users = ival;
    } else if (key == "learning_rate" && parse_f64(val, fval)) {
      cfg.learning_rate = fval;
    } else if (key == "batch_size" && parse_i64(val, ival)) {
      cfg.batch_size = static_cast<std::size_t>(ival);
    } else if (key == "embedding_dim" && parse_i64(val, ival)) {
      cfg.embedding_dim = ival;
    } else if (key == "heads" && parse_i64(val, ival)) {
      cfg.heads = ival;
    } else if (key == "key_dim" && parse_i64(val, ival)) {
      cfg.key_dim = ival;
    } else if (key == "max_seq_len" && parse_i64(val, ival)) {
      cfg.max_seq_len = static_cast<std::size_t>(ival);
    } else if (key == "epochs" && parse_i64(val, ival)) {
      cfg.epochs = static_cast<std::size_t>(ival);
    } else if (key == "seed" && parse_i64(val, ival)) {
      cfg.seed = static_cast<std::uint64_t>(ival);
    } else if (key == "attention_mode") {
      cfg.attention_mode = attention_mode_from(val);
    } else if (key == "trigger_mode") {
      cfg.trigger_mode = trigger_mode_from(val);
    } else if (key == "literal_eq9" && parse_i64(val, ival)) {
      cfg.literal_eq9 = ival != 0;
    } else if (key == "query_hidden" && parse_i64(val, ival)) {
      cfg.query_hidden = ival;
    } else if (key == "out_hidden1" && parse_i64(val, ival)) {
      cfg.out_hidden1 = ival;
    } else if (key == "out_hidden2" && parse_i64(val, ival)) {
      cfg.out_hidden2 = ival;
    } else if (key == "side_fields") {
      if (!val.empty())
        for (auto part : split_view(val, ',')) cfg.side_fields.emplace_back(part);
    } else if (key == "side_vocab_sizes") {
      if (!val.empty())
        for (auto part : split_view(val, ',')) {
          std::int64_t v = 0;
          if (!parse_i64(part, v)) fail("bad side_vocab_sizes");
          side_vocab_sizes.push_back(v);
        }
    } else if (key == "adam_beta1" && parse_f64(val, fval)) {
      cfg.adam_beta1 = fval;
    } else if (key == "adam_beta2" && parse_f64(val, fval)) {
      cfg.adam_beta2 = fval;
    } else if (key == "adam_eps" && parse_f64(val, fval)) {
      cfg.adam_eps = fval;
    } else {
      fail("unknown or malformed header line: " + line);
    }
  }
  if (line != "#data") fail("missing #data marker");
  if (n_items < 0 || n_users < 0) fail("missing n_items/n_users");
  if (expected_vocab_hash != 0 && ckpt.vocab_hash != expected_vocab_hash)
    fail("vocabulary hash mismatch: checkpoint was trained under a different id mapping");

  ckpt.model.cfg = cfg;
  ckpt.model.dims = make_dims(cfg, n_items, n_users, side_vocab_sizes);
  ckpt.model.params = make_params(ckpt.model.dims);

  std::size_t decl = 0;
  bool shape_ok = true;
  ckpt.model.params.for_each_tensor([&](const std::string& name, Tensor& t) {
    if (decl >= tensor_decls.size() || tensor_decls[decl].first != name ||
        tensor_decls[decl].second.first != t.rows || tensor_decls[decl].second.second != t.cols)
      shape_ok = false;
    ++decl;
  });
  if (!shape_ok || decl != tensor_decls.size()) fail("tensor list does not match model dimensions");

  ckpt.model.params.for_each_tensor([&](const std::string& name, Tensor& t) {
    in.read(reinterpret_cast<char*>(t.a.data()),
            static_cast<std::streamsize>(t.a.size() * sizeof(double)));
    if (in.gcount() != static_cast<std::streamsize>(t.a.size() * sizeof(double)))
      fail("truncated tensor payload at " + name);
  });
  char extra;
  if (in.read(&extra, 1)) fail("trailing bytes after tensor payload");
  return ckpt;
}

}  // namespace pi2i
