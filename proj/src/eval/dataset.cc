#include "geclip/eval/dataset.h"

#include <fstream>
#include <sstream>

#include "geclip/common/error.h"

namespace geclip::eval {

namespace fs = std::filesystem;

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::size_t parse_index(const std::string& text, const std::string& where) {
  std::size_t used = 0;
  unsigned long long v = 0;
  try {
    if (text.empty() || text[0] == '-') throw std::invalid_argument(text);
    v = std::stoull(text, &used);
  } catch (const std::exception&) {
    throw DataError(where + ": expected a non-negative integer, got '" + text + "'");
  }
  if (used != text.size()) throw DataError(where + ": expected a non-negative integer, got '" + text + "'");
  return static_cast<std::size_t>(v);
}

fs::path resolve(const fs::path& root, const std::string& p, const std::string& where) {
  if (p.empty()) throw DataError(where + ": empty path");
  fs::path full = fs::path(p).is_absolute() ? fs::path(p) : root / p;
  if (!fs::exists(full)) throw DataError(where + ": file not found: " + full.string());
  return full.lexically_normal();
}

std::string relative_to(const fs::path& p, const fs::path& root) {
  const fs::path rel = p.lexically_relative(root);
  if (rel.empty() || *rel.begin() == "..") return p.generic_string();
  return rel.generic_string();
}

}  // namespace

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  DatasetManifest m;
  m.root = fs::absolute(path).parent_path();
  std::string line;
  std::size_t lineno = 0;
  std::vector<std::pair<std::size_t, std::size_t>> label_lines;  // record, line
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const std::string where = path.filename().string() + ":" + std::to_string(lineno);
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("#classes=", 0) == 0) {
        m.classes_file = resolve(m.root, line.substr(9), where);
        std::ifstream cf(m.classes_file);
        std::string name;
        m.classes.clear();
        while (std::getline(cf, name)) {
          if (!name.empty() && name.back() == '\r') name.pop_back();
          if (!name.empty()) m.classes.push_back(name);
        }
      } else if (line.rfind("#split=", 0) == 0) {
        m.split = line.substr(7);
      }
      continue;
    }
    Record r;
    bool has_image = false;
    std::vector<std::string> box_labels;
    for (const std::string& field : split(line, '\t')) {
      const std::size_t eq = field.find('=');
      if (eq == std::string::npos) throw DataError(where + ": field without '=': '" + field + "'");
      const std::string key = field.substr(0, eq), value = field.substr(eq + 1);
      if (key == "image") {
        r.image = resolve(m.root, value, where);
        has_image = true;
      } else if (key == "label") {
        r.label = parse_index(value, where + " label");
        label_lines.emplace_back(m.records.size(), lineno);
      } else if (key == "caption") {
        if (value.empty()) throw DataError(where + ": empty caption");
        r.captions.push_back(value);
      } else if (key == "mask") {
        r.mask = resolve(m.root, value, where);
      } else if (key == "boxes") {
        for (const std::string& b : split(value, ';')) {
          const auto c = split(b, ',');
          if (c.size() != 4) throw DataError(where + ": box needs 4 coordinates, got '" + b + "'");
          Box box{parse_index(c[0], where + " box"), parse_index(c[1], where + " box"),
                  parse_index(c[2], where + " box"), parse_index(c[3], where + " box"), {}};
          if (box.x1 <= box.x0 || box.y1 <= box.y0) throw DataError(where + ": empty box '" + b + "'");
          r.boxes.push_back(box);
        }
      } else if (key == "box_labels") {
        box_labels = split(value, ';');
      } else {
        throw DataError(where + ": unknown field '" + key + "'");
      }
    }
    if (!has_image) throw DataError(where + ": record has no image field");
    if (!box_labels.empty()) {
      if (box_labels.size() != r.boxes.size()) {
        throw DataError(where + ": " + std::to_string(box_labels.size()) + " box labels for " +
                        std::to_string(r.boxes.size()) + " boxes");
      }
      for (std::size_t i = 0; i < box_labels.size(); ++i) r.boxes[i].label = box_labels[i];
    }
    m.records.push_back(std::move(r));
  }
  for (const auto& [rec, ln] : label_lines) {
    if (*m.records[rec].label >= m.classes.size()) {
      throw DataError(path.filename().string() + ":" + std::to_string(ln) + ": label " +
                      std::to_string(*m.records[rec].label) + " outside class table of " +
                      std::to_string(m.classes.size()));
    }
  }
  return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
  const fs::path root = fs::absolute(path).parent_path();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  if (!m.split.empty()) out << "#split=" << m.split << "\n";
  if (!m.classes.empty()) {
    const fs::path cf =
        m.classes_file.empty() ? root / (path.stem().string() + ".classes.txt") : fs::absolute(m.classes_file);
    std::ofstream c(cf, std::ios::binary);
    for (const auto& name : m.classes) c << name << "\n";
    if (!c) throw DataError("cannot write class table " + cf.string());
    out << "#classes=" << relative_to(cf, root) << "\n";
  }
  for (const Record& r : m.records) {
    out << "image=" << relative_to(fs::absolute(r.image), root);
    if (r.label) out << "\tlabel=" << *r.label;
    for (const auto& c : r.captions) out << "\tcaption=" << c;
    if (r.mask) out << "\tmask=" << relative_to(fs::absolute(*r.mask), root);
    if (!r.boxes.empty()) {
      out << "\tboxes=";
      bool labelled = false;
      for (std::size_t i = 0; i < r.boxes.size(); ++i) {
        const Box& b = r.boxes[i];
        out << (i ? ";" : "") << b.x0 << "," << b.y0 << "," << b.x1 << "," << b.y1;
        labelled = labelled || !b.label.empty();
      }
      if (labelled) {
        out << "\tbox_labels=";
        for (std::size_t i = 0; i < r.boxes.size(); ++i) out << (i ? ";" : "") << r.boxes[i].label;
      }
    }
    out << "\n";
  }
  if (!out) throw DataError("failed writing manifest " + path.string());
}

}  // namespace geclip::eval
