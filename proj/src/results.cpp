#include "vlseg/results.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "vlseg/error.hpp"
#include "vlseg/safetensors.hpp"

namespace vlseg {

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cell.push_back('"');
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cell.push_back(c);
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  out.push_back(cell);
  return out;
}

std::string csv_cell(const std::string& text) {
  if (text.find_first_of(",\"\n") == std::string::npos) return text;
  std::string out = "\"";
  for (char c : text) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

std::string xml_escape(const std::string& text) {
  std::string out;
  for (char c : text) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(2);
  s << std::fixed << v;
  return s.str();
}

const char* kSeriesColors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
                               "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939"};

}  // namespace

void ResultsTable::validate() const {
  for (const auto& r : rows) {
    if (r.label_count <= 0)
      throw ValidationError("results row '" + r.method + "': label count must be positive");
    if (!(r.miou >= 0.0 && r.miou <= 100.0))
      throw ValidationError("results row '" + r.method + "': mIoU " + r.miou_text + " outside [0, 100]");
  }
}

ResultsTable ResultsTable::filter_dataset(const std::string& dataset) const {
  ResultsTable out;
  for (const auto& r : rows) {
    if (r.dataset == dataset) out.rows.push_back(r);
  }
  return out;
}

std::vector<std::string> ResultsTable::methods() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (std::find(out.begin(), out.end(), r.method) == out.end()) out.push_back(r.method);
  }
  return out;
}

ResultsTable read_results_table(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open results table: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw ConfigError("results table is empty: " + path.string());
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> column;
  for (std::size_t i = 0; i < header.size(); ++i) column[header[i]] = i;
  for (const char* required : {"method", "label_count", "miou"}) {
    if (!column.count(required))
      throw ConfigError(path.string() + ": missing column '" + std::string(required) + "'");
  }
  auto get = [&](const std::vector<std::string>& cells, const std::string& name) -> std::string {
    auto it = column.find(name);
    return it != column.end() && it->second < cells.size() ? cells[it->second] : std::string();
  };
  ResultsTable table;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_csv_line(line);
    ResultRow row;
    row.method = get(cells, "method");
    row.net = get(cells, "net");
    row.dataset = get(cells, "dataset");
    row.split_fraction = get(cells, "split_fraction");
    row.miou_text = get(cells, "miou");
    try {
      row.label_count = std::stoll(get(cells, "label_count"));
      row.miou = std::stod(row.miou_text);
    } catch (const std::exception&) {
      throw ConfigError(path.string() + ":" + std::to_string(line_no) + ": unparsable label_count or miou");
    }
    table.rows.push_back(std::move(row));
  }
  table.validate();
  return table;
}

void write_results_table(const std::filesystem::path& path, const ResultsTable& table) {
  std::ostringstream out;
  out << "method,net,dataset,split_fraction,label_count,miou\n";
  for (const auto& r : table.rows) {
    out << csv_cell(r.method) << ',' << csv_cell(r.net) << ',' << csv_cell(r.dataset) << ','
        << csv_cell(r.split_fraction) << ',' << r.label_count << ','
        << (r.miou_text.empty() ? fmt(r.miou) : r.miou_text) << '\n';
  }
  atomic_write(path, out.str());
}

PlotOutputs plot_label_curves(const ResultsTable& table, const std::filesystem::path& svg_path,
                              const std::string& title) {
  if (table.rows.empty()) throw ConfigError("plot: the results table has no rows");
  table.validate();

  const double width = 720, height = 480, left = 70, right = 190, top = 40, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;

  int64_t min_labels = table.rows.front().label_count, max_labels = min_labels;
  double min_miou = table.rows.front().miou, max_miou = min_miou;
  for (const auto& r : table.rows) {
    min_labels = std::min(min_labels, r.label_count);
    max_labels = std::max(max_labels, r.label_count);
    min_miou = std::min(min_miou, r.miou);
    max_miou = std::max(max_miou, r.miou);
  }
  double lx0 = std::log10(static_cast<double>(min_labels)), lx1 = std::log10(static_cast<double>(max_labels));
  if (lx1 - lx0 < 1e-9) {
    lx0 -= 0.5;
    lx1 += 0.5;
  } else {
    const double pad = 0.05 * (lx1 - lx0);
    lx0 -= pad;
    lx1 += pad;
  }
  double y0 = std::floor(min_miou / 5.0) * 5.0, y1 = std::ceil(max_miou / 5.0) * 5.0;
  if (y1 - y0 < 5.0) y1 = y0 + 5.0;
  auto sx = [&](double labels) { return left + (std::log10(labels) - lx0) / (lx1 - lx0) * plot_w; };
  auto sy = [&](double miou) { return top + (1.0 - (miou - y0) / (y1 - y0)) * plot_h; };

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  if (!title.empty())
    svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
        << xml_escape(title) << "</text>\n";

  std::vector<int64_t> ticks;
  for (const auto& r : table.rows) ticks.push_back(r.label_count);
  std::sort(ticks.begin(), ticks.end());
  ticks.erase(std::unique(ticks.begin(), ticks.end()), ticks.end());
  for (auto t : ticks) {
    const double x = sx(static_cast<double>(t));
    svg << "<line x1=\"" << fmt(x) << "\" y1=\"" << top << "\" x2=\"" << fmt(x) << "\" y2=\"" << top + plot_h
        << "\" stroke=\"#e0e0e0\"/>\n";
    svg << "<text x=\"" << fmt(x) << "\" y=\"" << top + plot_h + 18 << "\" text-anchor=\"middle\">" << t
        << "</text>\n";
  }
  for (double v = y0; v <= y1 + 1e-9; v += 5.0) {
    const double y = sy(v);
    svg << "<line x1=\"" << left << "\" y1=\"" << fmt(y) << "\" x2=\"" << left + plot_w << "\" y2=\"" << fmt(y)
        << "\" stroke=\"#e0e0e0\"/>\n";
    svg << "<text x=\"" << left - 8 << "\" y=\"" << fmt(y + 4) << "\" text-anchor=\"end\">" << v << "</text>\n";
  }
  svg << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << plot_w << "\" height=\"" << plot_h
      << "\" fill=\"none\" stroke=\"black\"/>\n";
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 15
      << "\" text-anchor=\"middle\">Number of labeled images (log scale)</text>\n";
  svg << "<text transform=\"translate(20," << top + plot_h / 2
      << ") rotate(-90)\" text-anchor=\"middle\">mIoU (%)</text>\n";

  std::ostringstream data;
  data << "method,label_count,miou\n";
  const auto methods = table.methods();
  for (std::size_t m = 0; m < methods.size(); ++m) {
    const char* color = kSeriesColors[m % std::size(kSeriesColors)];
    std::vector<const ResultRow*> series;
    for (const auto& r : table.rows) {
      if (r.method == methods[m]) series.push_back(&r);
    }
    std::stable_sort(series.begin(), series.end(),
                     [](const ResultRow* a, const ResultRow* b) { return a->label_count < b->label_count; });
    if (series.size() > 1) {
      svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
      for (const auto* r : series) svg << fmt(sx(static_cast<double>(r->label_count))) << ',' << fmt(sy(r->miou)) << ' ';
      svg << "\"/>\n";
    }
    for (const auto* r : series) {
      svg << "<circle cx=\"" << fmt(sx(static_cast<double>(r->label_count))) << "\" cy=\"" << fmt(sy(r->miou))
          << "\" r=\"3.5\" fill=\"" << color << "\"><title>" << xml_escape(r->method) << ' ' << r->label_count << ": "
          << r->miou_text << "</title></circle>\n";
      data << csv_cell(r->method) << ',' << r->label_count << ','
           << (r->miou_text.empty() ? fmt(r->miou) : r->miou_text) << '\n';
    }
    const double ly = top + 14 + 18 * static_cast<double>(m);
    svg << "<line x1=\"" << left + plot_w + 12 << "\" y1=\"" << ly << "\" x2=\"" << left + plot_w + 36 << "\" y2=\""
        << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    svg << "<circle cx=\"" << left + plot_w + 24 << "\" cy=\"" << ly << "\" r=\"3.5\" fill=\"" << color << "\"/>\n";
    svg << "<text x=\"" << left + plot_w + 42 << "\" y=\"" << ly + 4 << "\">" << xml_escape(methods[m]) << "</text>\n";
  }
  svg << "</svg>\n";

  PlotOutputs out{svg_path, svg_path};
  out.data.replace_extension(".csv");
  if (out.data == out.svg) out.data += ".csv";
  atomic_write(out.svg, svg.str());
  atomic_write(out.data, data.str());
  return out;
}

}  // namespace vlseg
