#pragma once

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "cnntention/layers.hpp"

namespace cnntention {

// Checkpoint file: a text manifest followed by one raw little-endian blob of
// 32-bit floats in manifest order.
//
//   cnntention-checkpoint v1
//   meta <key> <value>
//   tensor <name> f32 <d0xd1x...> <byte_offset> <byte_length>
//   blob <total_bytes>
//   <raw bytes>
//
// Every named tensor of the model is included, BN running statistics as
// non-trainable entries.

struct CheckpointEntry {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::map<std::string, std::string> meta;
  std::vector<CheckpointEntry> tensors;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }
};

inline void save_checkpoint(const std::string& path, const ParamRefs<float>& params,
                            const std::map<std::string, std::string>& meta = {}) {
  std::ostringstream manifest;
  manifest << "cnntention-checkpoint v1\n";
  for (const auto& [k, v] : meta) manifest << "meta " << k << " " << v << "\n";
  std::size_t offset = 0;
  for (const auto* p : params) {
    manifest << "tensor " << p->name << " f32 ";
    const auto& shape = p->tensor.shape();
    for (std::size_t i = 0; i < shape.size(); ++i) manifest << (i ? "x" : "") << shape[i];
    const std::size_t nbytes = p->tensor.size() * sizeof(float);
    manifest << " " << offset << " " << nbytes << "\n";
    offset += nbytes;
  }
  manifest << "blob " << offset << "\n";

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), "checkpoint: cannot open '" + tmp + "' for writing");
    const std::string head = manifest.str();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto* p : params) {
      auto v = p->tensor.value();
      out.write(reinterpret_cast<const char*>(v.data()),
                static_cast<std::streamsize>(v.size() * sizeof(float)));
    }
    require(out.good(), "checkpoint: write to '" + tmp + "' failed");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), "checkpoint: cannot open '" + path + "'");
  std::string line;
  require(std::getline(in, line) && line == "cnntention-checkpoint v1",
          "checkpoint: '" + path + "' is not a v1 checkpoint (bad header)");

  Checkpoint ckpt;
  struct Rec {
    std::string name;
    Shape shape;
    std::size_t offset, nbytes;
  };
  std::vector<Rec> recs;
  std::size_t blob_bytes = 0;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "meta") {
      std::string k, v;
      ls >> k >> v;
      ckpt.meta[k] = v;
    } else if (tag == "tensor") {
      Rec r;
      std::string dtype, dims;
      ls >> r.name >> dtype >> dims >> r.offset >> r.nbytes;
      require(!ls.fail(), "checkpoint: malformed tensor record in '" + path + "'");
      require(dtype == "f32", "checkpoint: unsupported dtype '" + dtype + "' for " + r.name);
      std::istringstream ds(dims);
      std::string part;
      while (std::getline(ds, part, 'x')) r.shape.push_back(std::stoul(part));
      require(numel(r.shape) * sizeof(float) == r.nbytes,
              "checkpoint: byte length mismatch for tensor " + r.name);
      recs.push_back(std::move(r));
    } else if (tag == "blob") {
      ls >> blob_bytes;
      break;
    } else {
      fail("checkpoint: unexpected manifest line '" + line + "' in '" + path + "'");
    }
  }
  std::vector<char> blob(blob_bytes);
  in.read(blob.data(), static_cast<std::streamsize>(blob_bytes));
  require(in.gcount() == static_cast<std::streamsize>(blob_bytes),
          "checkpoint: truncated blob in '" + path + "'");

  for (auto& r : recs) {
    require(r.offset + r.nbytes <= blob_bytes,
            "checkpoint: tensor " + r.name + " extends past blob end");
    CheckpointEntry e;
    e.name = std::move(r.name);
    e.shape = std::move(r.shape);
    e.data.resize(r.nbytes / sizeof(float));
    std::memcpy(e.data.data(), blob.data() + r.offset, r.nbytes);
    ckpt.tensors.push_back(std::move(e));
  }
  return ckpt;
}

// Copies checkpoint values into the given parameters, matching by name.
// Errors list any missing or extra names.
inline void apply_checkpoint(const Checkpoint& ckpt, const ParamRefs<float>& params) {
  std::string missing, extra;
  std::map<std::string, const CheckpointEntry*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t;
  for (auto* p : params) {
    auto it = by_name.find(p->name);
    if (it == by_name.end()) {
      missing += (missing.empty() ? "" : ", ") + p->name;
      continue;
    }
    require(it->second->shape == p->tensor.shape(),
            "checkpoint: shape mismatch for " + p->name + ": file has " +
                shape_str(it->second->shape) + ", model has " + shape_str(p->tensor.shape()));
    auto dst = p->tensor.mutable_value();
    std::copy(it->second->data.begin(), it->second->data.end(), dst.begin());
    by_name.erase(it);
  }
  for (const auto& [name, t] : by_name) extra += (extra.empty() ? "" : ", ") + name;
  require(missing.empty() && extra.empty(),
          "checkpoint: parameter names do not match model (missing: [" + missing +
              "], unexpected: [" + extra + "])");
}

}  // namespace cnntention
