#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace geclip::eval {

struct Box {
  std::size_t x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // pixel corners, half-open
  std::string label;
};

struct Record {
  std::filesystem::path image;  // absolute after loading
  std::optional<std::size_t> label;
  std::vector<std::string> captions;
  std::optional<std::filesystem::path> mask;
  std::vector<Box> boxes;
};

// Line-delimited manifest. Each record line holds tab-separated key=value
// fields:
//   image=<path>  label=<class index>  caption=<text> (repeatable)
//   mask=<path>   boxes=x0,y0,x1,y1;...  box_labels=<text>;<text>...
// Header directives: "#classes=<file>" (one class name per line) and
// "#split=<id>". Other lines starting with '#' and blank lines are ignored.
// Relative paths resolve against the manifest's directory.
struct DatasetManifest {
  std::filesystem::path root;
  std::string split;
  std::filesystem::path classes_file;
  std::vector<std::string> classes;
  std::vector<Record> records;
};

// Throws DataError (with line number) on malformed fields, labels outside the
// class table or referenced files that do not exist.
DatasetManifest load_manifest(const std::filesystem::path& path);

// Writes paths relative to the manifest directory when possible. Relative
// input paths (records, class table) are taken against the working directory;
// without a class table path the table goes next to the manifest.
void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

}  // namespace geclip::eval
