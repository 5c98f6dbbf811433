// Copyright 2026 The seqloom Authors. Apache 2.0 License.
int main() { return 0; }
