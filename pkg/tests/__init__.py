# Tests package for depdecode
