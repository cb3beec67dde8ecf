#
# cpclab documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.
#
import os
import sys

on_rtd = os.environ.get("READTHEDOCS", None) == "True"

# Make the package importable for autodoc without installing it.
sys.path.insert(0, os.path.abspath(".."))

# -- General configuration ------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.intersphinx",
    "sphinx.ext.todo",
    "sphinx.ext.coverage",
    "sphinx.ext.viewcode",
]
if not on_rtd:
    extensions += [
        "sphinx.ext.githubpages",
    ]

templates_path = ["_templates"]

source_suffix = ".rst"

master_doc = "index"

# General information about the project.
project = "cpclab"
copyright = "2023, cpclab contributors"
author = "cpclab contributors"

# The short X.Y version.
version = "0.3"
# The full version, including alpha/beta/rc tags.
release = "0.3.0"

language = "en"

exclude_patterns = ["_build", "Thumbs.db", ".DS_Store"]

pygments_style = "sphinx"

todo_include_todos = True

autodoc_member_order = "bysource"

# -- Options for HTML output ----------------------------------------------

html_theme = "alabaster"

html_static_path = []

htmlhelp_basename = "cpclabdoc"

# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}

latex_documents = [
    (master_doc, "cpclab.tex", "cpclab Documentation", author, "manual"),
]

# -- Options for manual page output ---------------------------------------

man_pages = [(master_doc, "cpclab", "cpclab Documentation", [author], 1)]

# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (
        master_doc,
        "cpclab",
        "cpclab Documentation",
        author,
        "cpclab",
        "Desk-scale lab for noisy-label cleaners.",
        "Miscellaneous",
    ),
]

intersphinx_mapping = {
    "python": ("https://docs.python.org/3", None),
    "numpy": ("https://numpy.org/doc/stable", None),
}
