#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "lcp/common.hpp"
#include "lcp/csv.hpp"

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  fs::path dir = fs::temp_directory_path() / "lcp_csv_tests";
  fs::create_directories(dir);
  return dir / name;
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

}  // namespace

TEST_CASE("writer/reader round-trip preserves values exactly", "[csv]") {
  const fs::path p = temp_file("roundtrip.csv");
  {
    lcp::CsvWriter w(p, {"id", "x", "label"});
    w.field(1).field(0.1).field(std::string_view("alpha")).end_row();
    w.field(-7).field(1.0 / 3.0).field(std::string_view("beta")).end_row();
    w.flush();
  }
  lcp::CsvReader r(p);
  REQUIRE(r.column("id") == 0);
  REQUIRE(r.column("x") == 1);
  REQUIRE(r.column("label") == 2);
  REQUIRE(r.column("missing") == -1);
  REQUIRE(r.next_row());
  REQUIRE(r.as_int(0) == 1);
  REQUIRE(r.as_double(1) == 0.1);  // shortest round-trip formatting is exact
  REQUIRE(r.cell(2) == "alpha");
  REQUIRE(r.next_row());
  REQUIRE(r.as_int(0) == -7);
  REQUIRE(r.as_double(1) == 1.0 / 3.0);
  REQUIRE(r.cell(2) == "beta");
  REQUIRE_FALSE(r.next_row());
}

TEST_CASE("reader handles CRLF line endings and blank lines", "[csv]") {
  const fs::path p = temp_file("crlf.csv");
  write_text(p, "a,b\r\n1,2\r\n\r\n3,4\r\n");
  lcp::CsvReader r(p);
  REQUIRE(r.next_row());
  REQUIRE(r.as_int(0) == 1);
  REQUIRE(r.as_int(1) == 2);
  REQUIRE(r.next_row());
  REQUIRE(r.as_int(0) == 3);
  REQUIRE(r.as_int(1) == 4);
  REQUIRE_FALSE(r.next_row());
}

TEST_CASE("reader rejects malformed input with schema errors", "[csv]") {
  SECTION("missing file") {
    REQUIRE_THROWS_AS(lcp::CsvReader(temp_file("nope.csv")), lcp::Error);
  }
  SECTION("empty file") {
    const fs::path p = temp_file("empty.csv");
    write_text(p, "");
    REQUIRE_THROWS_AS(lcp::CsvReader(p), lcp::Error);
  }
  SECTION("required column absent") {
    const fs::path p = temp_file("cols.csv");
    write_text(p, "a,b\n1,2\n");
    lcp::CsvReader r(p);
    REQUIRE(r.require_column("a") == 0);
    REQUIRE_THROWS_AS(r.require_column("zz"), lcp::Error);
  }
  SECTION("ragged row") {
    const fs::path p = temp_file("ragged.csv");
    write_text(p, "a,b\n1,2,3\n");
    lcp::CsvReader r(p);
    REQUIRE_THROWS_AS(r.next_row(), lcp::Error);
  }
  SECTION("non-numeric cell") {
    const fs::path p = temp_file("nonnum.csv");
    write_text(p, "a\nfoo\n");
    lcp::CsvReader r(p);
    REQUIRE(r.next_row());
    REQUIRE_THROWS_AS(r.as_double(0), lcp::Error);
    REQUIRE_THROWS_AS(r.as_int(0), lcp::Error);
  }
  SECTION("partial numeric cell") {
    const fs::path p = temp_file("partial.csv");
    write_text(p, "a\n1.5x\n");
    lcp::CsvReader r(p);
    REQUIRE(r.next_row());
    REQUIRE_THROWS_AS(r.as_double(0), lcp::Error);
  }
}

TEST_CASE("writer enforces the declared column count", "[csv]") {
  const fs::path p = temp_file("narrow.csv");
  lcp::CsvWriter w(p, {"a", "b"});
  w.field(1);
  REQUIRE_THROWS_AS(w.end_row(), lcp::Error);
}

TEST_CASE("blank cells round-trip as empty strings", "[csv]") {
  const fs::path p = temp_file("blank.csv");
  {
    lcp::CsvWriter w(p, {"a", "b", "c"});
    w.field(1).blank().field(3).end_row();
    w.flush();
  }
  lcp::CsvReader r(p);
  REQUIRE(r.next_row());
  REQUIRE(r.cell(1).empty());
  REQUIRE(r.as_int(2) == 3);
}

TEST_CASE("significant-digit formatting caps precision", "[csv]") {
  std::string s;
  lcp::append_number(s, 0.123456789123, 9);
  REQUIRE(s == "0.123456789");
  s.clear();
  lcp::append_number(s, 1.0 / 3.0, 9);
  REQUIRE(s == "0.333333333");
  s.clear();
  lcp::append_number(s, 1250000.0, 3);
  // general format switches to scientific when shorter
  double v = 0.0;
  auto r = std::from_chars(s.data(), s.data() + s.size(), v);
  REQUIRE(r.ec == std::errc());
  REQUIRE(v == 1250000.0);
}

TEST_CASE("error kinds carry a machine-readable category", "[common]") {
  try {
    lcp::fail(lcp::ErrorKind::Schema, "boom");
  } catch (const lcp::Error& e) {
    REQUIRE(e.kind() == lcp::ErrorKind::Schema);
    REQUIRE(std::string(e.what()) == "boom");
  }
  REQUIRE(std::string(lcp::to_string(lcp::ErrorKind::Io)) == "io");
  REQUIRE(std::string(lcp::to_string(lcp::ErrorKind::Usage)) == "usage");
}
