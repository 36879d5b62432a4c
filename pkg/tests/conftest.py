import os
import sys

# src layout: make the package importable without an install
sys.path.insert(0, os.path.join(os.path.dirname(__file__), os.pardir, "src"))
