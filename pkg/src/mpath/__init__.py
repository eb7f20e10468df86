"""Visual-prefix prompting for structured pathology report generation."""
