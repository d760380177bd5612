#include "rfl/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

namespace rfl {

void write_checkpoint(const std::string& path,
                      const std::vector<NamedTensor>& entries) {
  nlohmann::json index;
  index["format"] = "rfl-checkpoint";
  index["version"] = 1;
  auto& list = index["entries"] = nlohmann::json::array();

  std::ostringstream blobs;
  for (const NamedTensor& e : entries) {
    const size_t offset = size_t(blobs.tellp());
    write_tensor_blob(blobs, e.tensor);
    list.push_back({{"name", e.name},
                    {"offset", offset},
                    {"length", size_t(blobs.tellp()) - offset}});
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path);
  out << index.dump() << "\n" << blobs.str();
  if (!out) throw IoError("failed writing checkpoint: " + path);
}

std::vector<NamedTensor> read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string header;
  if (!std::getline(in, header))
    throw IoError("checkpoint missing index header: " + path);
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(header);
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint index in " + path + ": " + e.what());
  }
  if (index.value("format", "") != "rfl-checkpoint")
    throw IoError("not a checkpoint file: " + path);
  const std::streampos data_start = in.tellg();
  std::vector<NamedTensor> out;
  for (const auto& e : index.at("entries")) {
    in.seekg(data_start + std::streampos(e.at("offset").get<size_t>()));
    Tensor t = read_tensor_blob(in);
    out.push_back({e.at("name").get<std::string>(), std::move(t)});
  }
  return out;
}

}  // namespace rfl
