"""
Test suite for the ehatcap bilingual captioning toolkit.
"""
