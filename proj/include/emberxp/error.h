#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace emberxp {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A JSONL record that could not be turned into a PESampleRecord.
/// `offset` is the byte offset within the line (or within the file when
/// raised by the dataset loader); `key_path` is dotted, e.g. "strings.avlength".
class RecordParseError : public Error {
 public:
  RecordParseError(const std::string& what, std::size_t offset, std::string key_path)
      : Error(what), offset_(offset), key_path_(std::move(key_path)) {}

  std::size_t offset() const { return offset_; }
  const std::string& key_path() const { return key_path_; }

 private:
  std::size_t offset_;
  std::string key_path_;
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class ModelFormatError : public Error {
 public:
  using Error::Error;
};

class DimensionError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace emberxp
