"""Curriculum-guided GRPO with verifiable multilingual rewards."""
