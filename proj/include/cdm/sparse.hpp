#pragma once

#include <vector>

namespace cdm {

/// Square sparse matrix in CSR form. Column indices are sorted within each
/// row; adjacency matrices store both directions of every undirected edge.
struct CsrMatrix {
    int n = 0;
    std::vector<int> row_ptr;  // n + 1 entries
    std::vector<int> col;
    std::vector<double> val;

    size_t nnz() const { return col.size(); }
};

}  // namespace cdm
