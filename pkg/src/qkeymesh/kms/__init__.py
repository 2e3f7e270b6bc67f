"""Key management service"""
